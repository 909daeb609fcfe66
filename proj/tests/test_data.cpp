#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "spatialgeo/data.hpp"
#include "spatialgeo/diagnostics.hpp"
#include "spatialgeo/errors.hpp"

using namespace spatialgeo;

namespace {

// Independent check of one line against the handful of mutations the fuzzer plants.
std::set<std::string> naive_fields(const std::string& line, std::set<std::string>& seen) {
    std::set<std::string> f;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (...) {
        return {"<json>"};
    }
    const std::string id = j.value("id", std::string());
    if (id.empty()) f.insert("id");
    if (!j.contains("question")) f.insert("question");
    if (j.contains("gt_value") && j["gt_value"].get<double>() <= 0) f.insert("gt_value");
    if (j["category"] != "height" && j["category"] != "width" && j["category"] != "vertical_distance" &&
        j["category"] != "direct_distance" && j["category"] != "horizontal_distance")
        f.insert("category");
    for (std::size_t k = 0; k < j["bboxes"].size(); ++k) {
        const auto& b = j["bboxes"][k];
        if (b["x"].get<double>() + b["w"].get<double>() > 1.0) f.insert("bboxes[" + std::to_string(k) + "].x+w");
    }
    if (!id.empty() && !seen.insert(id).second) f.insert("id");
    return f;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("rescale_bbox examples") {
    CHECK(rescale_bbox(BBox{0, 0, 640, 480, 640, 480}) == RelBBox{0, 0, 1, 1});
    RelBBox r = rescale_bbox(BBox{64, 48, 320, 240, 640, 480});
    CHECK(r.x == doctest::Approx(0.1));
    CHECK(r.y == doctest::Approx(0.1));
    CHECK(r.w == doctest::Approx(0.5));
    CHECK(r.h == doctest::Approx(0.5));
}

TEST_CASE("rescale_bbox round trip and dimension independence") {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double W = 16 + rng.below(2000), H = 16 + rng.below(2000);
        BBox b;
        b.image_width = W;
        b.image_height = H;
        b.x = rng.uniform(0, W - 2);
        b.y = rng.uniform(0, H - 2);
        b.w = rng.uniform(1, W - b.x);
        b.h = rng.uniform(1, H - b.y);
        RelBBox r = rescale_bbox(b);
        BBox back = unrescale_bbox(r, W, H);
        CHECK(std::abs(back.x - b.x) <= 0.5);
        CHECK(std::abs(back.w - b.w) <= 0.5);
        CHECK(std::abs(back.y - b.y) <= 0.5);
        CHECK(std::abs(back.h - b.h) <= 0.5);
        BBox scaled{b.x * 3, b.y * 3, b.w * 3, b.h * 3, W * 3, H * 3};
        RelBBox r3 = rescale_bbox(scaled);
        CHECK(r3.x == doctest::Approx(r.x).epsilon(1e-12));
        CHECK(r3.h == doctest::Approx(r.h).epsilon(1e-12));
    }
}

TEST_CASE("rescale_bbox rejects boxes outside the image") {
    try {
        rescale_bbox(BBox{600, 0, 100, 10, 640, 480}, "rec-7");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("rec-7") != std::string::npos);
    }
    CHECK_THROWS_AS(rescale_bbox(BBox{0, 0, 0, 10, 640, 480}), DataError);
    CHECK_THROWS_AS(rescale_bbox(BBox{-1, 0, 10, 10, 640, 480}), DataError);
}

TEST_CASE("subsample edges") {
    std::vector<int> v{5, 6, 7, 8};
    CHECK(subsample(v, 4, 1) == v);
    CHECK(subsample(v, 0, 1).empty());
    CHECK_THROWS_AS(subsample(v, 5, 1), ContractError);
    auto idx = subsample_indices(1000, 160, 3);
    CHECK(idx.size() == 160);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 160);
    CHECK(idx == subsample_indices(1000, 160, 3));
}

TEST_CASE("subsample overlap matches the hypergeometric expectation") {
    // Overlap of two independent 160-of-1000 draws: mean 25.6, sd about 4.4.
    double total = 0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        auto a = subsample_indices(1000, 160, 2 * t + 1);
        auto b = subsample_indices(1000, 160, 2 * t + 2);
        CHECK(a != b);
        std::vector<std::size_t> both;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
        total += static_cast<double>(both.size());
    }
    // Standard error of the mean is about 0.31; allow four of them.
    CHECK(std::abs(total / trials - 25.6) < 1.25);
}

TEST_CASE("subsample is uniform per index") {
    std::vector<int> hits(20, 0);
    for (int t = 0; t < 4000; ++t)
        for (auto i : subsample_indices(20, 5, t)) ++hits[i];
    // Expected 1000 hits each; binomial sd about 27.
    for (int h : hits) CHECK(std::abs(h - 1000) < 120);
}

TEST_CASE("synthetic dataset: determinism and answer dependence") {
    auto a = generate_synth_dataset(50, 7);
    auto b = generate_synth_dataset(50, 7);
    CHECK(dataset_to_jsonl(a) == dataset_to_jsonl(b));
    CHECK(dataset_to_jsonl(a) != dataset_to_jsonl(generate_synth_dataset(50, 8)));
    for (const auto& r : a) {
        CHECK(r.answer == answer_text(r.scene->geometry));
        CHECK(parse_quantity(r.answer)->value == doctest::Approx(r.scene->geometry));
    }
}

TEST_CASE("synthetic scenes: matched pairs share the semantic channels only") {
    SynthConfig cfg;
    EncoderConfig ecfg;
    SemanticEncoder sem(ecfg);
    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
        SyntheticScene s = random_scene(rng, cfg);
        SyntheticScene t = geometry_variant(s, rng, cfg);
        CHECK(s.same_semantics(t));
        CHECK(s.geometry != t.geometry);
        CHECK(answer_text(s.geometry) != answer_text(t.geometry));
        ImageGrid a = render_scene(s, cfg), b = render_scene(t, cfg);
        CHECK(testing::bit_equal(sem.encode(a), sem.encode(b)));
        CHECK_FALSE(a == b);
        CHECK(render_scene(s, cfg) == a);
    }
}

TEST_CASE("synthetic answers cover the metric range") {
    auto recs = generate_synth_dataset(500, 3);
    std::vector<int> bins(8, 0);
    for (const auto& r : recs) {
        const double g = r.scene->geometry;
        REQUIRE(g >= 1.0);
        REQUIRE(g <= 9.0);
        ++bins[std::min<std::size_t>(7, static_cast<std::size_t>(g - 1.0))];
    }
    for (int n : bins) CHECK(n > 40);  // 62.5 expected per unit bin
    std::set<QuestionCategory> cats;
    for (const auto& r : recs) cats.insert(r.category);
    CHECK(cats.size() == 5);
}

TEST_CASE("jsonl round trip") {
    auto recs = generate_synth_dataset(30, 4);
    VQARecord img;
    img.id = "photo-1";
    img.image = "images/a.ppm";
    img.question = question_for(QuestionCategory::Width);
    img.answer = "0.8 m";
    img.category = QuestionCategory::Width;
    img.ground_truth = Quantity{80, LengthUnit::Centimeter};
    recs.push_back(img);
    auto dir = testing::scratch_dir("jsonl");
    write_dataset(dir / "d.jsonl", recs);
    auto back = read_dataset(dir / "d.jsonl");
    REQUIRE(back.size() == recs.size());
    CHECK(dataset_to_jsonl(back) == dataset_to_jsonl(recs));
    CHECK(validate_jsonl(dir / "d.jsonl").empty());
    CHECK_THROWS_AS(read_dataset(dir / "missing.jsonl"), IoError);
}

TEST_CASE("validate_jsonl: well formed, planted violation, duplicates") {
    const std::string good = dataset_to_jsonl(generate_synth_dataset(20, 5));
    CHECK(validate_jsonl_text(good).empty());

    auto recs = generate_synth_dataset(3, 5);
    recs[1].boxes[0].x = 0.9;
    recs[1].boxes[0].w = 0.2;
    auto v = validate_jsonl_text(dataset_to_jsonl(recs));
    REQUIRE(v.size() == 1);
    CHECK(v[0].line == 2);
    CHECK(v[0].id == recs[1].id);
    CHECK(v[0].field == "bboxes[0].x+w");

    recs = generate_synth_dataset(3, 5);
    recs[2].id = recs[0].id;
    v = validate_jsonl_text(dataset_to_jsonl(recs));
    REQUIRE(v.size() == 1);
    CHECK(v[0].field == "id");
    CHECK(v[0].line == 3);

    v = validate_jsonl_text("{not json\n\n[1,2]\n");
    REQUIRE(v.size() == 2);
    CHECK(v[0].line == 1);
    CHECK(v[1].line == 3);

    auto dir = testing::scratch_dir("validate");
    CHECK_THROWS_AS(validate_jsonl(dir / "nope.jsonl"), IoError);
}

TEST_CASE("validate_jsonl agrees with a naive oracle on a fuzzed file") {
    auto recs = generate_synth_dataset(10000, 6);
    Rng rng(12);
    std::string text;
    for (const auto& r : recs) {
        auto j = nlohmann::json::parse(vqa_record_to_json(r));
        switch (rng.below(10)) {
            case 0: j.erase("question"); break;
            case 1: j["bboxes"][0]["x"] = 1.05 - j["bboxes"][0]["w"].get<double>(); break;
            case 2: j["gt_value"] = -1.0; break;
            case 3: j["category"] = "depth"; break;
            case 4: j["id"] = recs[rng.below(recs.size())].id; break;
            case 5: j["id"] = ""; break;
            default: break;
        }
        std::string line = j.dump();
        if (rng.below(50) == 0) line.pop_back();  // truncated JSON
        text += line + "\n";
    }
    auto dir = testing::scratch_dir("fuzz");
    {
        std::ofstream os(dir / "fuzz.jsonl");
        os << text;
    }
    std::vector<std::set<std::string>> expected;
    std::set<std::string> seen;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) expected.push_back(naive_fields(line, seen));

    auto got = validate_jsonl(dir / "fuzz.jsonl");
    std::vector<std::set<std::string>> actual(expected.size());
    for (const auto& v : got) actual[v.line - 1].insert(v.field.empty() ? "<json>" : v.field);
    std::size_t expected_count = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        expected_count += expected[i].size();
        if (actual[i] != expected[i]) {
            std::string a, e;
            for (auto& x : actual[i]) a += x + " ";
            for (auto& x : expected[i]) e += x + " ";
            CHECK_MESSAGE(false, "line " << i + 1 << " got [" << a << "] want [" << e << "]");
        }
    }
    CHECK(got.size() == expected_count);
    CHECK(expected_count > 3000);
}

TEST_CASE("linear probe separates geometry from semantics on matched scenes") {
    SynthConfig cfg;
    EncoderConfig ecfg;
    SemanticEncoder sem(ecfg);
    GeometryEncoder geo(ecfg);
    Rng rng(21);
    SyntheticScene base = random_scene(rng, cfg);
    std::vector<std::vector<double>> gf, sf;
    std::vector<double> y;
    for (int i = 0; i < 160; ++i) {
        SyntheticScene s = base;
        s.geometry = std::round(rng.uniform(cfg.min_value, cfg.max_value) * 10.0) / 10.0;
        ImageGrid img = render_scene(s, cfg);
        gf.push_back(mean_pool(geo.encode(img).last()));
        sf.push_back(mean_pool(sem.encode(img)));
        y.push_back(s.geometry);
    }
    const double r2_geo = ridge_probe_r2(gf, y, 120);
    const double r2_sem = ridge_probe_r2(sf, y, 120);
    MESSAGE("geometry R2 " << r2_geo << ", semantic R2 " << r2_sem);
    CHECK(r2_geo > 0.9);
    CHECK(r2_sem < 0.2);
}

TEST_CASE("ridge probe recovers a linear target") {
    Rng rng(4);
    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (int i = 0; i < 200; ++i) {
        std::vector<double> row{rng.normal(), rng.normal(), rng.normal()};
        y.push_back(2 * row[0] - row[2] + 0.5);
        x.push_back(row);
    }
    CHECK(ridge_probe_r2(x, y, 150, 1e-6) > 0.9999);
    std::vector<double> constant(200, 1.0);
    CHECK(ridge_probe_r2(x, constant, 150) == 0.0);
}

}  // TEST_SUITE
