#include "doctest.h"
#include "helpers.hpp"
#include "spatialgeo/data.hpp"
#include "spatialgeo/errors.hpp"
#include "spatialgeo/training.hpp"

using namespace spatialgeo;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.decoder.layers = 1;
    c.decoder.dim = 16;
    c.decoder.heads = 2;
    return c;
}

std::vector<Sample> small_data(const SpatialGeoModel& m, std::size_t n, std::uint64_t seed = 5) {
    return m.make_samples(generate_synth_dataset(n, seed));
}

StageSpec quick(StageSpec s, std::size_t epochs) {
    s.epochs = epochs;
    s.batch_size = 4;
    s.lr = 5e-3;
    return s;
}

ParamSet snapshot(const SpatialGeoModel& m) { return m.params().clone(); }

bool same_prefix(const ParamSet& a, const ParamSet& b, const std::string& prefix) {
    return a.checksum_prefix(prefix) == b.checksum_prefix(prefix);
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("zero epochs leave every parameter bit-identical") {
    SpatialGeoModel m(small_config());
    auto data = small_data(m, 8);
    ParamSet before = snapshot(m);
    TrainState st = run_stage1(quick(StageSpec::stage1(), 0), m, data);
    CHECK(st.history.empty());
    CHECK(same_prefix(before, m.params(), ""));
}

TEST_CASE("stage 1 moves only the hierarchical adapter") {
    SpatialGeoModel m(small_config());
    auto data = small_data(m, 8);
    ParamSet before = snapshot(m);
    const auto enc = m.encoder_checksum();
    TrainState st = run_stage1(quick(StageSpec::stage1(), 1), m, data);
    CHECK(st.history.size() == 2);
    CHECK(same_prefix(before, m.params(), "clip_adapter"));
    CHECK(same_prefix(before, m.params(), "lm"));
    CHECK_FALSE(same_prefix(before, m.params(), "hier_adapter"));
    CHECK(m.encoder_checksum() == enc);
    CHECK(m.completed_stage() == 1);
    for (const auto& e : st.history) CHECK(e.drop_rate == 0.0);
}

TEST_CASE("training is reproducible for a fixed seed") {
    auto run = [] {
        SpatialGeoModel m(small_config());
        auto data = small_data(m, 12);
        run_stage1(quick(StageSpec::stage1(), 1), m, data);
        return run_stage2(quick(StageSpec::stage2(), 2), m, data).history;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == 6);
    CHECK(a == b);
}

TEST_CASE("loss decreases on a small stage-2 run") {
    SpatialGeoModel m(small_config());
    auto data = small_data(m, 16);
    run_stage1(quick(StageSpec::stage1(), 1), m, data);
    auto spec = quick(StageSpec::stage2(), 8);
    spec.drop_probability = 0.0;
    auto h = run_stage2(spec, m, data).history;
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 4; ++i) first += h[i].loss;
    for (std::size_t i = h.size() - 4; i < h.size(); ++i) last += h[i].loss;
    CHECK(last < first);
}

TEST_CASE("dropping changes the stage-2 trajectory") {
    auto run = [](double p) {
        SpatialGeoModel m(small_config());
        auto data = small_data(m, 16);
        run_stage1(quick(StageSpec::stage1(), 1), m, data);
        auto spec = quick(StageSpec::stage2(), 2);
        spec.drop_probability = p;
        return run_stage2(spec, m, data).history;
    };
    auto off = run(0.0);
    auto on = run(0.3);
    CHECK(off != on);
    double dropped = 0;
    for (const auto& e : on) dropped += e.drop_rate;
    CHECK(dropped > 0.0);
    for (const auto& e : off) CHECK(e.drop_rate == 0.0);
}

TEST_CASE("lora stage 2 leaves base decoder weights untouched") {
    SpatialGeoModel m(small_config());
    auto data = small_data(m, 8);
    run_stage1(quick(StageSpec::stage1(), 1), m, data);
    auto spec = quick(StageSpec::stage2(), 1);
    spec.lora = LoRAConfig{};
    ParamSet before = snapshot(m);
    run_stage2(spec, m, data);
    REQUIRE(m.lora());
    std::size_t lora_changed = 0;
    for (const auto& name : m.params().names()) {
        const bool lora = name.find(".lora_a") != std::string::npos || name.find(".lora_b") != std::string::npos;
        if (name.rfind("lm", 0) == 0 && !lora && before.contains(name)) {
            CHECK_MESSAGE(testing::bit_equal(before.get(name), m.params().get(name)), name);
        }
        if (lora && !m.params().is_frozen(name)) ++lora_changed;
    }
    CHECK(lora_changed == 2 * 2 * m.config().decoder.layers);
    CHECK_FALSE(same_prefix(before, m.params(), "clip_adapter"));
}

TEST_CASE("stage 2 requires a completed stage 1") {
    SpatialGeoModel m(small_config());
    auto data = small_data(m, 4);
    CHECK_THROWS_AS(run_stage2(quick(StageSpec::stage2(), 1), m, data), StateError);
}

TEST_CASE("stage specs reject bad selectors and ranges") {
    auto s1 = StageSpec::stage1();
    CHECK_NOTHROW(s1.validate());
    CHECK_NOTHROW(StageSpec::stage2().validate());

    auto bad = s1;
    bad.trainable.push_back("semantic_encoder");
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s1;
    bad.trainable.push_back("lm");
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s1;
    bad.drop_probability = 0.3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s1;
    bad.lora = LoRAConfig{};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = StageSpec::stage2();
    bad.frozen.push_back("lm");
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = StageSpec::stage2();
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = StageSpec::stage2();
    bad.drop_probability = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = StageSpec::stage2();
    bad.stage = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = StageSpec::stage2();
    bad.trainable.push_back("");
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoint save, load, save is byte-identical") {
    SpatialGeoModel m(small_config());
    auto data = small_data(m, 8);
    TrainState st = run_stage1(quick(StageSpec::stage1(), 1), m, data);
    const std::string bytes = encode_model_checkpoint(m, st);
    LoadedCheckpoint back = decode_model_checkpoint(bytes);
    CHECK(encode_model_checkpoint(*back.model, back.state) == bytes);
    CHECK(back.model->completed_stage() == 1);
    CHECK(back.state.history == st.history);

    auto dir = testing::scratch_dir("train_ckpt");
    save_checkpoint(m, st, dir / "a.ckpt");
    LoadedCheckpoint f = load_checkpoint(dir / "a.ckpt");
    CHECK(same_prefix(f.model->params(), m.params(), ""));
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);

    std::string damaged = bytes;
    damaged[damaged.size() / 3] ^= 0x10;
    CHECK_THROWS_AS(decode_model_checkpoint(damaged), LoadError);
}

TEST_CASE("resuming mid-stage reproduces the uninterrupted run") {
    auto spec = quick(StageSpec::stage2(), 3);
    std::string mid;
    ParamSet full_params;
    std::vector<LossEntry> full;
    {
        SpatialGeoModel m(small_config());
        auto data = small_data(m, 12);
        run_stage1(quick(StageSpec::stage1(), 1), m, data);
        auto hook = [&](const SpatialGeoModel& model, const TrainState& st) {
            if (st.epoch == 1) mid = encode_model_checkpoint(model, st);
        };
        full = run_stage2(spec, m, data, hook).history;
        full_params = snapshot(m);
    }
    REQUIRE_FALSE(mid.empty());
    LoadedCheckpoint ck = decode_model_checkpoint(mid);
    CHECK(ck.state.epoch == 1);
    auto data = small_data(*ck.model, 12);
    auto resumed = run_stage2(spec, *ck.model, data, {}, std::move(ck.state)).history;
    CHECK(resumed == full);
    CHECK(same_prefix(ck.model->params(), full_params, ""));
}

TEST_CASE("a stage-1 checkpoint seeds a stage-2 run") {
    SpatialGeoModel m(small_config());
    auto data = small_data(m, 8);
    TrainState st = run_stage1(quick(StageSpec::stage1(), 1), m, data);
    LoadedCheckpoint ck = decode_model_checkpoint(encode_model_checkpoint(m, st));
    CHECK(same_prefix(ck.model->params(), m.params(), "hier_adapter"));
    TrainState s2 = run_stage2(quick(StageSpec::stage2(), 1), *ck.model, data);
    CHECK(s2.stage == 2);
    CHECK(ck.model->completed_stage() == 2);
    CHECK(s2.history.front().step == 1);  // counter restarts with the stage
}

TEST_CASE("loss log csv") {
    std::vector<LossEntry> h{{0, 1, 0, 2.5, 0.0}, {1, 2, 0, 1.25, 0.5}};
    CHECK(loss_log_csv(h) == "step,stage,epoch,loss,drop_rate\n0,1,0,2.5,0\n1,2,0,1.25,0.5\n");
}

TEST_CASE("config json round trip and strictness") {
    ModelConfig c = small_config();
    c.fusion.interleave_order = InterleaveOrder::GeometryFirst;
    c.fusion.hier_depth = 3;
    c.seed = 42;
    ModelConfig back;
    from_json_into(to_json(c), back);
    CHECK(to_json(back) == to_json(c));
    CHECK(back.fusion.interleave_order == InterleaveOrder::GeometryFirst);

    StageSpec s = StageSpec::stage2();
    s.lora = LoRAConfig{};
    s.epochs = 3;
    StageSpec sb;
    from_json_into(to_json(s), sb);
    CHECK(to_json(sb) == to_json(s));
    CHECK(sb.lora.has_value());

    ModelConfig x;
    CHECK_THROWS_AS(from_json_into(nlohmann::json{{"decoder", {{"layerz", 2}}}}, x), ConfigError);
    CHECK_THROWS_AS(from_json_into(nlohmann::json{{"seed", "one"}}, x), ConfigError);
    CHECK_THROWS_AS(from_json_into(nlohmann::json{{"fusion", {{"interleave_order", "sideways"}}}}, x), ConfigError);
    ModelConfig partial;
    from_json_into(nlohmann::json{{"seed", 9}}, partial);
    CHECK(partial.seed == 9);
    CHECK(partial.decoder.dim == ModelConfig{}.decoder.dim);
}

}  // TEST_SUITE
