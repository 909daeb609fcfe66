#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "spatialgeo/data.hpp"
#include "spatialgeo/diagnostics.hpp"
#include "spatialgeo/errors.hpp"
#include "spatialgeo/eval.hpp"
#include "spatialgeo/training.hpp"

namespace spatialgeo::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
    os << bytes;
    if (!os) throw IoError("failed writing '" + p.string() + "'");
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create directory '" + p.string() + "': " + ec.message());
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return ss.str();
}

// The only artifact allowed to differ between identical runs.
void write_meta(const RunConfig& rc, const std::vector<std::string>& args, const std::string& started) {
    json j = {{"subcommand", rc.subcommand}, {"args", args}, {"started", started}, {"finished", utc_now()}};
    write_file(rc.out / "meta.json", j.dump(2) + "\n");
}

// Config file sections: "model", "stage1", "stage2". Overrides address keys
// with dots, e.g. stage2.epochs=3 or model.decoder.dim=16.
json load_config_doc(const RunConfig& rc) {
    json doc = json::object();
    if (!rc.config_path.empty()) {
        std::ifstream is(rc.config_path);
        if (!is) throw IoError("cannot read config '" + rc.config_path + "'");
        try {
            doc = json::parse(is);
        } catch (const json::exception& e) {
            throw ConfigError("config '" + rc.config_path + "' is not valid JSON: " + e.what());
        }
        if (!doc.is_object()) throw ConfigError("config root must be an object");
    }
    for (const auto& o : rc.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
        const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;
        }
        json* node = &doc;
        std::size_t start = 0;
        for (;;) {
            const auto dot = key.find('.', start);
            const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
            if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            if (node->is_null()) *node = json::object();
            start = dot + 1;
        }
    }
    static const std::set<std::string> sections{"model", "stage1", "stage2"};
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (!sections.count(it.key())) throw ConfigError("unknown config section '" + it.key() + "'");
    }
    return doc;
}

ModelConfig model_config(const json& doc) {
    ModelConfig c;
    if (doc.contains("model")) from_json_into(doc["model"], c);
    return c;
}

StageSpec stage_spec(const json& doc, int stage) {
    StageSpec s = stage == 1 ? StageSpec::stage1() : StageSpec::stage2();
    const char* key = stage == 1 ? "stage1" : "stage2";
    if (doc.contains(key)) from_json_into(doc[key], s);
    if (s.stage != stage) throw ConfigError(std::string(key) + ".stage must be " + std::to_string(stage));
    return s;
}

std::string describe(const std::vector<Violation>& v, const fs::path& path) {
    std::ostringstream ss;
    ss << v.size() << " schema violation(s) in '" << path.string() << "':";
    for (const auto& x : v) {
        ss << "\n  line " << x.line;
        if (!x.id.empty()) ss << " id " << x.id;
        if (!x.field.empty()) ss << " " << x.field;
        ss << ": " << x.message;
    }
    return ss.str();
}

// Validated records with image paths resolved against the dataset's directory.
std::vector<VQARecord> load_records(const fs::path& path) {
    const auto violations = validate_jsonl(path);
    if (!violations.empty()) throw DataError(describe(violations, path));
    auto recs = read_dataset(path);
    const fs::path base = path.parent_path();
    for (auto& r : recs) {
        if (!r.scene && fs::path(r.image).is_relative()) r.image = (base / r.image).string();
    }
    return recs;
}

std::size_t variant_depth(const std::string& v) {
    if (v == "sa") return 1;
    if (v == "ha3") return 3;
    if (v == "ha4") return 4;
    if (v == "ha5") return 5;
    throw ConfigError("unknown variant '" + v + "'");
}

void write_reports(const fs::path& dir, const Report& r) {
    write_file(dir / "report.json", report_to_json(r));
    write_file(dir / "report.csv", report_to_csv(r));
    write_file(dir / "plot.csv", report_plot_csv(r));
}

void print_summary(std::ostream& out, const Report& r) {
    out << "average " << format_number(r.average) << "% over " << r.total << " records (" << r.parse_failures
        << " parse failures)\n";
    for (const auto& c : r.categories) {
        out << "  " << category_name(c.category) << ": "
            << (c.accuracy ? format_number(*c.accuracy) + "% of " + std::to_string(c.total) : std::string("no records"))
            << "\n";
    }
}

// ---- subcommands ----------------------------------------------------------------

int cmd_make_data(const RunConfig& rc, std::size_t count, bool scenes, std::ostream& out) {
    const SynthConfig sc;
    auto recs = generate_synth_dataset(count, rc.seed.value_or(1), sc);
    if (scenes) {
        ensure_dir(rc.out / "scenes");
        for (const auto& r : recs) write_ppm(rc.out / "scenes" / (r.id + ".ppm"), render_scene(*r.scene, sc));
    }
    write_dataset(rc.out / "dataset.jsonl", recs);
    out << "wrote " << recs.size() << " records to " << (rc.out / "dataset.jsonl").string() << "\n";
    return kOk;
}

struct TrainOptions {
    int stage = 1;
    std::string data;
    std::string from;
    std::string variant;
    std::string drop;
    std::string clip;
    std::string geometry;
};

int cmd_train(const RunConfig& rc, const TrainOptions& o, std::ostream& out) {
    const json doc = load_config_doc(rc);
    StageSpec spec = stage_spec(doc, o.stage);
    if (!o.data.empty()) spec.dataset = o.data;
    if (spec.dataset.empty()) throw ConfigError("train needs --data or a dataset in the stage config");
    if (rc.seed) spec.seed = *rc.seed;
    if (o.drop == "off") spec.drop_probability = 0.0;
    if (o.drop == "on" && o.stage == 1) throw ConfigError("feature dropping applies to stage 2 only");
    if (o.drop == "on" && spec.drop_probability == 0.0) spec.drop_probability = StageSpec::stage2().drop_probability;

    std::unique_ptr<SpatialGeoModel> model;
    std::optional<TrainState> resume;
    if (!o.from.empty()) {
        LoadedCheckpoint ck = load_checkpoint(o.from);
        model = std::move(ck.model);
        if (ck.state.stage == o.stage && model->completed_stage() < o.stage) {
            resume = std::move(ck.state);
        } else if (o.stage == 1) {
            throw StateError("checkpoint '" + o.from + "' has no unfinished stage-1 run to resume");
        }
        if (!o.variant.empty() && variant_depth(o.variant) != model->config().fusion.hier_depth) {
            throw ConfigError("--variant " + o.variant + " does not match the checkpointed adapter depth " +
                              std::to_string(model->config().fusion.hier_depth));
        }
    } else {
        if (o.stage == 2) throw StateError("stage 2 needs a stage-1 checkpoint (--from)");
        ModelConfig mc = model_config(doc);
        if (rc.seed) mc.seed = *rc.seed;
        if (!o.variant.empty()) mc.fusion.hier_depth = variant_depth(o.variant);
        model = std::make_unique<SpatialGeoModel>(mc);
    }
    auto& fusion = model->mutable_config().fusion;
    if (!o.clip.empty()) fusion.clip_branch_enabled = o.clip == "on";
    if (!o.geometry.empty()) fusion.geometry_branch_enabled = o.geometry == "on";
    model->config().validate();

    const auto samples = model->make_samples(load_records(spec.dataset));
    const std::string tag = "stage" + std::to_string(o.stage);
    auto hook = [&](const SpatialGeoModel& m, const TrainState& st) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s-epoch%03zu.ckpt", tag.c_str(), st.epoch);
        save_checkpoint(m, st, rc.out / name);
    };
    TrainState st = o.stage == 1 ? run_stage1(spec, *model, samples, hook, std::move(resume))
                                 : run_stage2(spec, *model, samples, hook, std::move(resume));

    save_checkpoint(*model, st, rc.out / (tag + ".ckpt"));
    write_file(rc.out / ("loss-" + tag + ".csv"), loss_log_csv(st.history));
    const json used = {{"model", to_json(model->config())}, {"stage", to_json(spec)}};
    write_file(rc.out / (tag + "-config.json"), used.dump(2) + "\n");

    out << tag << ": " << st.epoch << " epochs, " << st.step << " steps";
    if (!st.history.empty()) out << ", last batch loss " << format_number(st.history.back().loss);
    out << "\ncheckpoint " << (rc.out / (tag + ".ckpt")).string() << "\n";
    return kOk;
}

std::vector<EvalRecord> answer_all(SpatialGeoModel& model, const std::vector<VQARecord>& recs, std::size_t workers,
                                   std::size_t max_new) {
    std::vector<EvalRecord> results(recs.size());
    workers = std::clamp<std::size_t>(workers, 1, recs.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    auto work = [&](std::size_t w) {
        try {
            for (std::size_t i = next++; i < recs.size(); i = next++) {
                const Sample s = model.make_sample(recs[i]);
                EvalRecord e;
                e.id = recs[i].id;
                e.category = recs[i].category;
                e.ground_truth = *recs[i].ground_truth;
                e.answer = model.answer(s, max_new);
                score_record(e);
                results[i] = std::move(e);
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work, w);
    work(0);
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return results;
}

int cmd_eval(const RunConfig& rc, const std::string& from, const std::string& data, std::size_t workers,
             std::size_t max_new, std::ostream& out) {
    LoadedCheckpoint ck = load_checkpoint(from);
    std::vector<VQARecord> recs;
    for (auto& r : load_records(data)) {
        if (r.ground_truth) recs.push_back(std::move(r));
    }
    if (recs.empty()) throw DataError("dataset '" + data + "' has no records with a metric ground truth");

    const auto results = answer_all(*ck.model, recs, workers, max_new);
    std::string lines;
    for (const auto& r : results) lines += eval_record_to_json(r) + "\n";
    write_file(rc.out / "answers.jsonl", lines);
    const Report report = aggregate(results);
    write_reports(rc.out, report);
    print_summary(out, report);
    return kOk;
}

int cmd_score(const RunConfig& rc, const std::string& answers, const std::string& truth, std::ostream& out,
              std::ostream& err) {
    std::vector<EvalRecord> recs;
    if (truth.empty()) {
        EvalLoad load = read_eval_records(answers);
        if (!load.issues.empty()) {
            std::ostringstream ss;
            ss << load.issues.size() << " malformed answer record(s) in '" << answers << "':";
            for (const auto& i : load.issues) ss << "\n  line " << i.line << (i.id.empty() ? "" : " id " + i.id) << ": " << i.message;
            throw DataError(ss.str());
        }
        recs = std::move(load.records);
    } else {
        std::ifstream is(answers);
        if (!is) throw IoError("cannot read '" + answers + "'");
        std::map<std::string, std::string> by_id;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception&) {
                throw DataError(answers + ":" + std::to_string(lineno) + ": malformed JSON");
            }
            if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("answer") ||
                !j["answer"].is_string()) {
                throw DataError(answers + ":" + std::to_string(lineno) + ": needs string fields id and answer");
            }
            if (!by_id.emplace(j["id"].get<std::string>(), j["answer"].get<std::string>()).second) {
                throw DataError(answers + ":" + std::to_string(lineno) + ": duplicate id " + j["id"].get<std::string>());
            }
        }
        std::size_t missing = 0;
        for (const auto& r : load_records(truth)) {
            if (!r.ground_truth) continue;
            EvalRecord e;
            e.id = r.id;
            e.category = r.category;
            e.ground_truth = *r.ground_truth;
            auto it = by_id.find(r.id);
            if (it == by_id.end()) {
                ++missing;
            } else {
                e.answer = it->second;
            }
            recs.push_back(std::move(e));
        }
        if (missing) err << "warning: " << missing << " record(s) have no answer and count as incorrect\n";
    }
    if (recs.empty()) throw DataError("nothing to score");
    const Report report = aggregate(recs);
    write_reports(rc.out, report);
    print_summary(out, report);
    return kOk;
}

int cmd_diagnose(const RunConfig& rc, std::size_t pairs, const std::string& mode, std::ostream& out) {
    const EncoderConfig enc = model_config(load_config_doc(rc)).encoder;
    enc.validate();
    SemanticEncoder sem(enc);
    GeometryEncoder geo(enc);
    const auto probe = SimilarityProbe::all_taps(enc);
    const SynthConfig sc;
    Rng rng(derive_seed(rc.seed.value_or(1), 0xd1a6));
    std::vector<PairResult> results;
    for (std::size_t i = 0; i < pairs; ++i) {
        const SyntheticScene a = random_scene(rng, sc);
        const SyntheticScene b = mode == "matched" ? geometry_variant(a, rng, sc) : random_scene(rng, sc);
        char id[32];
        std::snprintf(id, sizeof(id), "pair-%04zu", i);
        results.push_back({id, probe_pair(resize_to_square(render_scene(a, sc), enc.image_side),
                                          resize_to_square(render_scene(b, sc), enc.image_side), sem, geo, probe)});
    }
    write_file(rc.out / "similarity.csv", similarity_csv(results));
    const std::string contrast = contrast_csv(results);
    write_file(rc.out / "contrast.csv", contrast);
    out << contrast;
    return kOk;
}

int cmd_validate(const std::string& data, std::ostream& out, std::ostream& err) {
    const auto v = validate_jsonl(data);
    if (!v.empty()) {
        err << describe(v, data) << "\n";
        return kData;
    }
    out << "ok: " << data << "\n";
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Geometry-semantics fusion pipeline: data, training, evaluation and diagnostics", "spatialgeo"};
    app.require_subcommand(1);

    RunConfig rc;
    std::string out_dir;
    std::uint64_t seed = 0;
    std::vector<CLI::Option*> seed_opts;
    auto common = [&](CLI::App* sub, bool configurable) {
        sub->add_option("--out", out_dir, std::string("Output directory (default $") + kOutRootEnv + "/<subcommand>)");
        seed_opts.push_back(sub->add_option("--seed", seed, "Seed propagated to every module"));
        if (configurable) {
            sub->add_option("--config", rc.config_path, "JSON config with model, stage1 and stage2 sections");
            sub->add_option("--set", rc.overrides, "Config override, dotted.key=value (repeatable)")
                ->expected(1)
                ->take_all();
        }
    };

    std::size_t count = 100;
    std::string scenes = "on";
    auto* make_data = app.add_subcommand("make-data", "Generate a synthetic spatial QA dataset");
    make_data->add_option("--count", count, "Number of records")->capture_default_str();
    make_data->add_option("--scenes", scenes, "Also write one PPM per scene")->check(CLI::IsMember({"on", "off"}));
    common(make_data, false);

    TrainOptions to;
    auto* train = app.add_subcommand("train", "Run training stage 1 or 2");
    train->add_option("--stage", to.stage, "Training stage")->required()->check(CLI::IsMember({1, 2}));
    train->add_option("--data", to.data, "Training dataset (JSONL)");
    train->add_option("--from", to.from, "Checkpoint to continue from (required for stage 2)");
    train->add_option("--variant", to.variant, "Adapter variant")->check(CLI::IsMember({"sa", "ha3", "ha4", "ha5"}));
    train->add_option("--drop", to.drop, "Random feature dropping in stage 2")->check(CLI::IsMember({"on", "off"}));
    train->add_option("--clip", to.clip, "Semantic branch")->check(CLI::IsMember({"on", "off"}));
    train->add_option("--geometry", to.geometry, "Geometry branch")->check(CLI::IsMember({"on", "off"}));
    common(train, true);

    std::string from, data, answers, truth;
    std::size_t workers = 1, max_new = 8;
    auto* eval = app.add_subcommand("eval", "Answer and score a dataset with a checkpoint");
    eval->add_option("--from", from, "Checkpoint")->required();
    eval->add_option("--data", data, "Evaluation dataset (JSONL)")->required();
    eval->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    eval->add_option("--max-new", max_new, "Generated token limit")->check(CLI::PositiveNumber)->capture_default_str();
    common(eval, false);

    auto* score = app.add_subcommand("score", "Score an answer file without a model");
    score->add_option("--answers", answers, "Answers JSONL")->required();
    score->add_option("--truth", truth, "Ground-truth dataset; omit when answers carry gt_value/gt_unit");
    common(score, false);

    std::size_t pairs = 100;
    std::string mode = "matched";
    auto* diagnose = app.add_subcommand("diagnose", "Encoder similarity probe on synthetic pairs");
    diagnose->add_option("--pairs", pairs, "Number of pairs")->check(CLI::PositiveNumber)->capture_default_str();
    diagnose->add_option("--mode", mode, "Pair kind")->check(CLI::IsMember({"matched", "random"}))->capture_default_str();
    common(diagnose, true);

    auto* validate = app.add_subcommand("validate", "Check a dataset against the record schema");
    validate->add_option("--data", data, "Dataset (JSONL)")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kOk : kUsage;
    }

    rc.subcommand = app.get_subcommands().front()->get_name();
    for (auto* o : seed_opts) {
        if (o->count()) rc.seed = seed;
    }
    if (out_dir.empty()) {
        const char* root = std::getenv(kOutRootEnv);
        rc.out = fs::path(root && *root ? root : "runs") / rc.subcommand;
    } else {
        rc.out = out_dir;
    }

    try {
        if (validate->parsed()) return cmd_validate(data, out, err);
        const std::string started = utc_now();
        ensure_dir(rc.out);
        int code = kOk;
        if (make_data->parsed()) code = cmd_make_data(rc, count, scenes == "on", out);
        if (train->parsed()) code = cmd_train(rc, to, out);
        if (eval->parsed()) code = cmd_eval(rc, from, data, workers, max_new, out);
        if (score->parsed()) code = cmd_score(rc, answers, truth, out, err);
        if (diagnose->parsed()) code = cmd_diagnose(rc, pairs, mode, out);
        write_meta(rc, args, started);
        return code;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const StateError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kData;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << "\n";
        return kData;
    } catch (const LoadError& e) {
        err << "load error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kInternal;
    }
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace spatialgeo::cli
