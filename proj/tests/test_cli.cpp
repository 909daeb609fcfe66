#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "spatialgeo/data.hpp"
#include "spatialgeo/training.hpp"

using namespace spatialgeo;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result call(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

const std::vector<std::string> kTiny{"--set", "model.decoder.dim=16", "--set", "model.decoder.layers=1",
                                     "--set", "stage1.epochs=1",      "--set", "stage2.epochs=1",
                                     "--set", "stage1.batch_size=4",  "--set", "stage2.batch_size=4"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
    args.insert(args.end(), kTiny.begin(), kTiny.end());
    return args;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("make-data writes the requested records deterministically") {
    auto dir = testing::scratch_dir("cli_make");
    auto r = call({"make-data", "--count", "100", "--seed", "4", "--out", (dir / "a").string(), "--scenes", "off"});
    REQUIRE(r.code == cli::kOk);
    CHECK(r.out.find("100") != std::string::npos);
    const std::string a = slurp(dir / "a" / "dataset.jsonl");
    CHECK(std::count(a.begin(), a.end(), '\n') == 100);
    call({"make-data", "--count", "100", "--seed", "4", "--out", (dir / "b").string(), "--scenes", "off"});
    CHECK(slurp(dir / "b" / "dataset.jsonl") == a);
    CHECK(validate_jsonl(dir / "a" / "dataset.jsonl").empty());

    r = call({"make-data", "--count", "0", "--out", (dir / "z").string()});
    CHECK(r.code == cli::kOk);
    CHECK(slurp(dir / "z" / "dataset.jsonl").empty());
    CHECK(fs::exists(dir / "z" / "meta.json"));

    r = call({"make-data", "--count", "2", "--out", (dir / "s").string()});
    CHECK(fs::exists(dir / "s" / "scenes" / "synth-000001.ppm"));
}

TEST_CASE("default output root comes from the environment") {
    auto dir = testing::scratch_dir("cli_env");
    ::setenv(cli::kOutRootEnv, dir.c_str(), 1);
    auto r = call({"make-data", "--count", "1"});
    ::unsetenv(cli::kOutRootEnv);
    CHECK(r.code == cli::kOk);
    CHECK(fs::exists(dir / "make-data" / "dataset.jsonl"));
}

TEST_CASE("usage errors exit with 1") {
    CHECK(call({}).code == cli::kUsage);
    CHECK(call({"frobnicate"}).code == cli::kUsage);
    CHECK(call({"train", "--stage", "3", "--data", "x"}).code == cli::kUsage);
    CHECK(call({"train", "--stage", "1", "--variant", "ha9", "--data", "x"}).code == cli::kUsage);
    CHECK(call({"--help"}).code == cli::kOk);
    auto dir = testing::scratch_dir("cli_usage");
    call({"make-data", "--count", "4", "--out", (dir / "d").string(), "--scenes", "off"});
    const std::string data = (dir / "d" / "dataset.jsonl").string();
    auto r = call({"train", "--stage", "2", "--data", data, "--out", (dir / "t").string()});
    CHECK(r.code == cli::kUsage);
    CHECK(r.err.find("--from") != std::string::npos);
    r = call({"train", "--stage", "1", "--data", data, "--out", (dir / "t").string(), "--set", "model.decoder.dimz=3"});
    CHECK(r.code == cli::kUsage);
    r = call({"train", "--stage", "1", "--data", data, "--out", (dir / "t").string(), "--drop", "on"});
    CHECK(r.code == cli::kUsage);
}

TEST_CASE("data and io errors exit with 2") {
    auto dir = testing::scratch_dir("cli_data");
    call({"make-data", "--count", "4", "--out", (dir / "d").string(), "--scenes", "off"});
    const std::string data = (dir / "d" / "dataset.jsonl").string();
    auto r = call({"train", "--stage", "2", "--from", (dir / "missing.ckpt").string(), "--data", data, "--out",
                   (dir / "t").string()});
    CHECK(r.code == cli::kData);

    std::string text = slurp(data);
    text.replace(text.find("\"question\""), 10, "\"questio_\"");
    { std::ofstream(dir / "bad.jsonl") << text; }
    r = call({"validate", "--data", (dir / "bad.jsonl").string()});
    CHECK(r.code == cli::kData);
    CHECK(r.err.find("synth-000000") != std::string::npos);
    CHECK(call({"validate", "--data", data}).code == cli::kOk);
    CHECK(call({"validate", "--data", (dir / "nope.jsonl").string()}).code == cli::kData);
}

TEST_CASE("stage-1 training through the cli touches only the hierarchical adapter") {
    auto dir = testing::scratch_dir("cli_train");
    call({"make-data", "--count", "8", "--seed", "2", "--out", (dir / "d").string(), "--scenes", "off"});
    const std::string data = (dir / "d" / "dataset.jsonl").string();
    auto r = call(with_tiny({"train", "--stage", "1", "--data", data, "--out", (dir / "s1").string(), "--seed", "5",
                             "--variant", "ha3"}));
    REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
    for (const char* f : {"stage1.ckpt", "stage1-epoch001.ckpt", "loss-stage1.csv", "stage1-config.json", "meta.json"})
        CHECK_MESSAGE(fs::exists(dir / "s1" / f), f);

    LoadedCheckpoint ck = load_checkpoint(dir / "s1" / "stage1.ckpt");
    CHECK(ck.model->config().fusion.hier_depth == 3);
    CHECK(ck.model->config().seed == 5);
    SpatialGeoModel fresh(ck.model->config());
    const auto& a = fresh.params();
    const auto& b = ck.model->params();
    CHECK(a.checksum_prefix("clip_adapter") == b.checksum_prefix("clip_adapter"));
    CHECK(a.checksum_prefix("lm") == b.checksum_prefix("lm"));
    CHECK(a.checksum_prefix("hier_adapter") != b.checksum_prefix("hier_adapter"));

    auto cfg = nlohmann::json::parse(slurp(dir / "s1" / "stage1-config.json"));
    CHECK(cfg["stage"]["seed"] == 5);
    CHECK(cfg["stage"]["epochs"] == 1);

    r = call(with_tiny({"train", "--stage", "2", "--from", (dir / "s1" / "stage1.ckpt").string(), "--data", data,
                        "--out", (dir / "s2").string(), "--variant", "ha4"}));
    CHECK(r.code == cli::kUsage);
    r = call(with_tiny({"train", "--stage", "2", "--from", (dir / "s1" / "stage1.ckpt").string(), "--data", data,
                        "--out", (dir / "s2").string(), "--drop", "off", "--clip", "off"}));
    REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
    LoadedCheckpoint ck2 = load_checkpoint(dir / "s2" / "stage2.ckpt");
    CHECK(ck2.model->completed_stage() == 2);
    CHECK_FALSE(ck2.model->config().fusion.clip_branch_enabled);
    CHECK(slurp(dir / "s2" / "loss-stage2.csv").find(",0\n") != std::string::npos);
}

TEST_CASE("eval writes answers and reports; worker count does not change bytes") {
    auto dir = testing::scratch_dir("cli_eval");
    call({"make-data", "--count", "10", "--seed", "3", "--out", (dir / "d").string(), "--scenes", "off"});
    const std::string data = (dir / "d" / "dataset.jsonl").string();
    REQUIRE(call(with_tiny({"train", "--stage", "1", "--data", data, "--out", (dir / "t").string()})).code == 0);
    const std::string ckpt = (dir / "t" / "stage1.ckpt").string();
    auto r = call({"eval", "--from", ckpt, "--data", data, "--workers", "1", "--out", (dir / "e1").string()});
    REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
    REQUIRE(call({"eval", "--from", ckpt, "--data", data, "--workers", "4", "--out", (dir / "e4").string()}).code == 0);
    for (const char* f : {"answers.jsonl", "report.json", "report.csv", "plot.csv"}) {
        CHECK_MESSAGE(slurp(dir / "e1" / f) == slurp(dir / "e4" / f), f);
        CHECK(!slurp(dir / "e1" / f).empty());
    }
    { std::ofstream(dir / "empty.jsonl"); }
    r = call({"eval", "--from", ckpt, "--data", (dir / "empty.jsonl").string(), "--out", (dir / "e0").string()});
    CHECK(r.code == cli::kData);
}

TEST_CASE("score: perfect oracle answers give 100 everywhere") {
    auto dir = testing::scratch_dir("cli_score");
    call({"make-data", "--count", "40", "--seed", "8", "--out", (dir / "d").string(), "--scenes", "off"});
    const std::string data = (dir / "d" / "dataset.jsonl").string();
    std::string answers;
    for (const auto& rec : read_dataset(data))
        answers += nlohmann::json{{"id", rec.id}, {"answer", rec.answer}}.dump() + "\n";
    { std::ofstream(dir / "answers.jsonl") << answers; }
    auto r = call({"score", "--answers", (dir / "answers.jsonl").string(), "--truth", data, "--out",
                   (dir / "s").string()});
    REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
    auto rep = nlohmann::json::parse(slurp(dir / "s" / "report.json"));
    CHECK(rep["average"] == 100.0);
    for (const auto& c : rep["categories"]) {
        if (!c["accuracy"].is_null()) CHECK(c["accuracy"] == 100.0);
    }

    { std::ofstream(dir / "partial.jsonl") << answers.substr(0, answers.find('\n') + 1); }
    r = call({"score", "--answers", (dir / "partial.jsonl").string(), "--truth", data, "--out", (dir / "p").string()});
    CHECK(r.code == cli::kOk);
    CHECK(r.err.find("39") != std::string::npos);
    CHECK(nlohmann::json::parse(slurp(dir / "p" / "report.json"))["average"] == 2.5);

    { std::ofstream(dir / "broken.jsonl") << "{\"id\": 3}\n"; }
    CHECK(call({"score", "--answers", (dir / "broken.jsonl").string(), "--out", (dir / "b").string()}).code ==
          cli::kData);
}

TEST_CASE("diagnose writes similarity and contrast csv") {
    auto dir = testing::scratch_dir("cli_diag");
    auto r = call({"diagnose", "--pairs", "12", "--seed", "3", "--out", (dir / "a").string()});
    REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
    const std::string sim = slurp(dir / "a" / "similarity.csv");
    CHECK(std::count(sim.begin(), sim.end(), '\n') == 1 + 12 * 7);
    CHECK(slurp(dir / "a" / "contrast.csv").rfind("tap,mean_similarity,pairs\nsemantic,1,12\n", 0) == 0);
    call({"diagnose", "--pairs", "12", "--seed", "3", "--out", (dir / "b").string()});
    CHECK(slurp(dir / "b" / "similarity.csv") == sim);
}

}  // TEST_SUITE
