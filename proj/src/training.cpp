#include "spatialgeo/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "spatialgeo/checkpoint.hpp"
#include "spatialgeo/errors.hpp"
#include "spatialgeo/eval.hpp"

namespace spatialgeo {

using nlohmann::json;

namespace {

const std::vector<std::string> kReservedSelectors{"encoder", "semantic_encoder", "geometry_encoder"};
const std::vector<std::string> kStage1Frozen{kClipAdapterPrefix, kLmPrefix};

// True when some name could match both selectors.
bool selectors_overlap(const std::string& a, const std::string& b) { return has_prefix(a, b) || has_prefix(b, a); }

bool matches_any(const std::string& name, const std::vector<std::string>& selectors) {
    for (const auto& s : selectors) {
        if (has_prefix(name, s)) return true;
    }
    return false;
}

bool same_lora(const LoRAConfig& a, const LoRAConfig& b) {
    return a.rank == b.rank && a.alpha == b.alpha && a.targets == b.targets;
}

// Restores the model's drop probability when a stage ends, even on error.
class DropOverride {
public:
    DropOverride(SpatialGeoModel& m, double p) : m_(m), saved_(m.config().fusion.drop_probability) {
        m_.mutable_config().fusion.drop_probability = p;
    }
    ~DropOverride() { m_.mutable_config().fusion.drop_probability = saved_; }

private:
    SpatialGeoModel& m_;
    double saved_;
};

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

TrainState run_stage(const StageSpec& spec, SpatialGeoModel& model, const std::vector<Sample>& data,
                     const EpochHook& hook, std::optional<TrainState> resume, double drop_p) {
    TrainState st = resume ? std::move(*resume) : begin_stage(spec);
    if (st.stage != spec.stage) throw StateError("resume state belongs to stage " + std::to_string(st.stage));
    if (st.epoch > spec.epochs) throw StateError("resume state is past the configured number of epochs");
    if (data.empty() && spec.epochs > st.epoch) throw DataError("training set is empty");
    apply_stage_freeze(model, spec);
    DropOverride drop(model, drop_p);
    auto& params = model.params();

    for (std::size_t epoch = st.epoch; epoch < spec.epochs; ++epoch) {
        const auto order = permutation(data.size(), st.rng);
        for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
            const std::size_t end = std::min(order.size(), start + spec.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            params.zero_grad();
            double total = 0.0;
            std::size_t dropped = 0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t idx = order[k];
                // One stream per (stage, epoch, sample) keeps drops independent of batch layout.
                Rng sample_rng(derive_seed(spec.seed, 0xd209, static_cast<std::uint64_t>(spec.stage), epoch, idx));
                bool was_dropped = false;
                Tensor l = model.loss(data[idx], &sample_rng, true, &was_dropped);
                total += l.item();
                dropped += was_dropped ? 1 : 0;
                // Ablations can cut every path to the trainable set (e.g. no geometry in stage 1).
                if (l.requires_grad()) scale(l, inv).backward();
            }
            st.optimizer.step(params);
            ++st.step;
            st.history.push_back(
                {st.step, spec.stage, epoch, total * inv, static_cast<double>(dropped) * inv});
        }
        st.epoch = epoch + 1;
        if (hook) hook(model, st);
    }
    if (st.epoch == spec.epochs && model.completed_stage() < spec.stage) model.set_completed_stage(spec.stage);
    return st;
}

// Small strict reader for config objects.
class Fields {
public:
    Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T>
    void read(const char* key, T& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        const json& v = j_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) fail(key, "expected a boolean");
        } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
            if (!v.is_number_integer() || v.get<std::int64_t>() < 0) fail(key, "expected a non-negative integer");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) fail(key, "expected an integer");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) fail(key, "expected a number");
        }
        try {
            out = v.get<T>();
        } catch (const json::exception& e) {
            fail(key, e.what());
        }
    }

    const json* sub(const char* key) {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
        }
    }

    [[noreturn]] void fail(const std::string& key, const std::string& what) const {
        throw ConfigError(where_ + "." + key + ": " + what);
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

const char* order_name(InterleaveOrder o) {
    return o == InterleaveOrder::SemanticFirst ? "semantic_first" : "geometry_first";
}

}  // namespace

StageSpec StageSpec::stage1() {
    StageSpec s;
    s.stage = 1;
    s.trainable = {kHierAdapterPrefix};
    s.frozen = kStage1Frozen;
    s.drop_probability = 0.0;
    return s;
}

StageSpec StageSpec::stage2() {
    StageSpec s;
    s.stage = 2;
    s.trainable = {kClipAdapterPrefix, kHierAdapterPrefix, kLmPrefix};
    s.drop_probability = 0.3;
    return s;
}

void StageSpec::validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (!(drop_probability >= 0.0 && drop_probability <= 1.0)) throw ConfigError("drop_probability must be in [0, 1]");
    for (const auto* list : {&trainable, &frozen}) {
        for (const auto& s : *list) {
            if (s.empty()) throw ConfigError("empty name selector");
            for (const auto& r : kReservedSelectors) {
                if (selectors_overlap(s, r)) throw ConfigError("selector '" + s + "': encoders are never trainable");
            }
        }
    }
    for (const auto& t : trainable) {
        for (const auto& f : frozen) {
            if (selectors_overlap(t, f)) throw ConfigError("selector '" + t + "' overlaps frozen selector '" + f + "'");
        }
    }
    if (stage == 1) {
        for (const auto& t : trainable) {
            for (const auto& f : kStage1Frozen) {
                if (selectors_overlap(t, f)) throw ConfigError("stage 1 must keep " + f + ".* frozen (selector '" + t + "')");
            }
        }
        if (drop_probability != 0.0) throw ConfigError("feature dropping is a stage-2 mechanism");
        if (lora) throw ConfigError("LoRA applies to stage 2 only");
    }
}

void apply_stage_freeze(SpatialGeoModel& model, const StageSpec& spec) {
    spec.validate();
    auto& params = model.params();
    const bool lora_active = model.lora().has_value();
    params.freeze_all();
    for (const auto& name : params.names()) {
        if (!matches_any(name, spec.trainable) || matches_any(name, spec.frozen)) continue;
        if (lora_active && has_prefix(name, kLmPrefix + ".") && !is_lora_name(name)) continue;
        if (name.ends_with(".lora_scale")) continue;
        params.unfreeze(name);
    }
    if (spec.stage == 1) {
        for (const auto& name : params.names()) {
            if (!params.is_frozen(name) && !has_prefix(name, kHierAdapterPrefix + "."))
                throw ConfigError("stage 1 would train '" + name + "'");
        }
    }
}

TrainState begin_stage(const StageSpec& spec) {
    spec.validate();
    TrainState st;
    st.stage = spec.stage;
    AdamWConfig oc;
    oc.lr = spec.lr;
    st.optimizer = AdamW(oc);
    st.rng = Rng(derive_seed(spec.seed, 0x5ff1e, static_cast<std::uint64_t>(spec.stage)));
    return st;
}

TrainState run_stage1(const StageSpec& spec, SpatialGeoModel& model, const std::vector<Sample>& data,
                      const EpochHook& hook, std::optional<TrainState> resume) {
    if (spec.stage != 1) throw ConfigError("run_stage1 needs a stage-1 spec");
    return run_stage(spec, model, data, hook, std::move(resume), 0.0);
}

TrainState run_stage2(const StageSpec& spec, SpatialGeoModel& model, const std::vector<Sample>& data,
                      const EpochHook& hook, std::optional<TrainState> resume) {
    if (spec.stage != 2) throw ConfigError("run_stage2 needs a stage-2 spec");
    if (model.completed_stage() < 1) throw StateError("stage 2 needs a model loaded from a completed stage-1 checkpoint");
    spec.validate();
    if (spec.lora) {
        if (!model.lora()) {
            model.enable_lora(*spec.lora, spec.seed);
        } else if (!same_lora(*model.lora(), *spec.lora)) {
            throw ConfigError("model LoRA settings differ from the stage spec");
        }
    } else if (model.lora()) {
        throw ConfigError("model carries LoRA adapters but the stage spec has none");
    }
    return run_stage(spec, model, data, hook, std::move(resume), spec.drop_probability);
}

std::string loss_log_csv(const std::vector<LossEntry>& history) {
    std::string out = "step,stage,epoch,loss,drop_rate\n";
    for (const auto& e : history) {
        out += std::to_string(e.step) + "," + std::to_string(e.stage) + "," + std::to_string(e.epoch) + "," +
               format_number(e.loss) + "," + format_number(e.drop_rate) + "\n";
    }
    return out;
}

namespace {
const std::string kMetaKind = "spatialgeo-model";
const std::string kMomentPrefix1 = "opt.m/";
const std::string kMomentPrefix2 = "opt.v/";
const std::string kHistoryName = "state.history";
}  // namespace

std::string encode_model_checkpoint(const SpatialGeoModel& model, const TrainState& state) {
    json meta;
    meta["kind"] = kMetaKind;
    meta["model"] = to_json(model.config());
    meta["vocab"] = model.vocab().tokens();
    meta["lora"] = model.lora() ? to_json(*model.lora()) : json(nullptr);
    meta["completed_stage"] = model.completed_stage();
    meta["encoder_checksum"] = model.encoder_checksum();
    const auto& oc = state.optimizer.config();
    meta["state"] = {{"stage", state.stage},
                     {"epoch", state.epoch},
                     {"step", state.step},
                     {"rng", state.rng.state()},
                     {"optimizer",
                      {{"lr", oc.lr},
                       {"beta1", oc.beta1},
                       {"beta2", oc.beta2},
                       {"eps", oc.eps},
                       {"weight_decay", oc.weight_decay},
                       {"t", state.optimizer.steps()}}}};

    CheckpointData data;
    data.meta = meta.dump(2);
    data.put_params(model.params());
    for (const auto& [name, m] : state.optimizer.first_moments()) data.put(kMomentPrefix1 + name, {m.size()}, m);
    for (const auto& [name, v] : state.optimizer.second_moments()) data.put(kMomentPrefix2 + name, {v.size()}, v);
    std::vector<double> hist;
    hist.reserve(state.history.size() * 5);
    for (const auto& e : state.history) {
        hist.insert(hist.end(), {static_cast<double>(e.step), static_cast<double>(e.stage),
                                 static_cast<double>(e.epoch), e.loss, e.drop_rate});
    }
    data.put(kHistoryName, {state.history.size(), 5}, std::move(hist));
    return encode_checkpoint(data);
}

LoadedCheckpoint decode_model_checkpoint(const std::string& bytes) {
    const CheckpointData data = decode_checkpoint(bytes);
    json meta;
    try {
        meta = json::parse(data.meta);
    } catch (const json::exception& e) {
        throw LoadError(std::string("checkpoint metadata is not JSON: ") + e.what());
    }
    try {
        if (meta.at("kind").get<std::string>() != kMetaKind) throw LoadError("not a model checkpoint");
        ModelConfig cfg;
        from_json_into(meta.at("model"), cfg);
        LoadedCheckpoint out;
        out.model = std::make_unique<SpatialGeoModel>(cfg, Vocab(meta.at("vocab").get<std::vector<std::string>>()));
        auto& model = *out.model;
        if (model.encoder_checksum() != meta.at("encoder_checksum").get<std::uint64_t>())
            throw LoadError("encoder weights regenerated from the stored seed do not match the checkpoint");
        if (!meta.at("lora").is_null()) {
            LoRAConfig lc;
            from_json_into(meta.at("lora"), lc);
            model.enable_lora(lc, 0);
        }
        model.set_completed_stage(meta.at("completed_stage").get<int>());

        auto& params = model.params();
        std::size_t matched = 0;
        for (const auto& [name, rec] : data.tensors) {
            if (has_prefix(name, "opt.") || has_prefix(name, "state.")) continue;
            if (!params.contains(name)) throw LoadError("checkpoint tensor '" + name + "' has no place in the model");
            auto& t = params.get(name);
            if (t.shape() != rec.shape) throw LoadError("shape mismatch for '" + name + "'");
            std::copy(rec.values.begin(), rec.values.end(), t.mutable_data().begin());
            if (rec.frozen) {
                params.freeze(name);
            } else {
                params.unfreeze(name);
            }
            ++matched;
        }
        if (matched != params.size()) throw LoadError("checkpoint is missing model tensors");

        const json& s = meta.at("state");
        TrainState& st = out.state;
        st.stage = s.at("stage").get<int>();
        st.epoch = s.at("epoch").get<std::size_t>();
        st.step = s.at("step").get<std::uint64_t>();
        st.rng.set_state(s.at("rng").get<std::string>());
        const json& o = s.at("optimizer");
        AdamWConfig oc;
        oc.lr = o.at("lr").get<double>();
        oc.beta1 = o.at("beta1").get<double>();
        oc.beta2 = o.at("beta2").get<double>();
        oc.eps = o.at("eps").get<double>();
        oc.weight_decay = o.at("weight_decay").get<double>();
        st.optimizer = AdamW(oc);
        std::map<std::string, std::vector<double>> m, v;
        for (const auto& [name, rec] : data.tensors) {
            if (has_prefix(name, kMomentPrefix1)) m[name.substr(kMomentPrefix1.size())] = rec.values;
            if (has_prefix(name, kMomentPrefix2)) v[name.substr(kMomentPrefix2.size())] = rec.values;
        }
        st.optimizer.restore(o.at("t").get<std::uint64_t>(), std::move(m), std::move(v));
        const auto& hist = data.at(kHistoryName);
        if (hist.shape.size() != 2 || hist.shape[1] != 5) throw LoadError("malformed loss history");
        for (std::size_t i = 0; i < hist.shape[0]; ++i) {
            const double* r = hist.values.data() + i * 5;
            st.history.push_back({static_cast<std::uint64_t>(r[0]), static_cast<int>(r[1]),
                                  static_cast<std::size_t>(r[2]), r[3], r[4]});
        }
        return out;
    } catch (const json::exception& e) {
        throw LoadError(std::string("checkpoint metadata: ") + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("checkpoint metadata: ") + e.what());
    }
}

void save_checkpoint(const SpatialGeoModel& model, const TrainState& state, const std::filesystem::path& path) {
    const std::string bytes = encode_model_checkpoint(model, state);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_model_checkpoint(bytes);
}

json to_json(const EncoderConfig& c) {
    return {{"patch_size", c.patch_size}, {"image_side", c.image_side}, {"semantic_dim", c.semantic_dim},
            {"geometry_dim", c.geometry_dim}, {"blocks", c.blocks},       {"seed", c.seed}};
}

json to_json(const FusionConfig& c) {
    return {{"drop_probability", c.drop_probability},
            {"interleave_order", order_name(c.interleave_order)},
            {"clip_branch_enabled", c.clip_branch_enabled},
            {"geometry_branch_enabled", c.geometry_branch_enabled},
            {"hier_depth", c.hier_depth}};
}

json to_json(const DecoderConfig& c) {
    return {{"layers", c.layers},     {"dim", c.dim},         {"heads", c.heads},
            {"max_len", c.max_len},   {"vocab_size", c.vocab_size}, {"mlp_ratio", c.mlp_ratio}};
}

json to_json(const LoRAConfig& c) { return {{"rank", c.rank}, {"alpha", c.alpha}, {"targets", c.targets}}; }

json to_json(const ModelConfig& c) {
    return {{"encoder", to_json(c.encoder)},
            {"fusion", to_json(c.fusion)},
            {"decoder", to_json(c.decoder)},
            {"adapter_hidden", c.adapter_hidden},
            {"seed", c.seed}};
}

json to_json(const StageSpec& s) {
    json j = {{"stage", s.stage},       {"trainable", s.trainable}, {"frozen", s.frozen},
              {"dataset", s.dataset},   {"epochs", s.epochs},       {"batch_size", s.batch_size},
              {"lr", s.lr},             {"drop_probability", s.drop_probability}, {"seed", s.seed}};
    j["lora"] = s.lora ? to_json(*s.lora) : json(nullptr);
    return j;
}

void from_json_into(const json& j, EncoderConfig& c) {
    Fields f(j, "encoder");
    f.read("patch_size", c.patch_size);
    f.read("image_side", c.image_side);
    f.read("semantic_dim", c.semantic_dim);
    f.read("geometry_dim", c.geometry_dim);
    f.read("blocks", c.blocks);
    f.read("seed", c.seed);
    f.finish();
}

void from_json_into(const json& j, FusionConfig& c) {
    Fields f(j, "fusion");
    f.read("drop_probability", c.drop_probability);
    std::string order = order_name(c.interleave_order);
    f.read("interleave_order", order);
    if (order == "semantic_first") {
        c.interleave_order = InterleaveOrder::SemanticFirst;
    } else if (order == "geometry_first") {
        c.interleave_order = InterleaveOrder::GeometryFirst;
    } else {
        f.fail("interleave_order", "expected semantic_first or geometry_first");
    }
    f.read("clip_branch_enabled", c.clip_branch_enabled);
    f.read("geometry_branch_enabled", c.geometry_branch_enabled);
    f.read("hier_depth", c.hier_depth);
    f.finish();
}

void from_json_into(const json& j, DecoderConfig& c) {
    Fields f(j, "decoder");
    f.read("layers", c.layers);
    f.read("dim", c.dim);
    f.read("heads", c.heads);
    f.read("max_len", c.max_len);
    f.read("vocab_size", c.vocab_size);
    f.read("mlp_ratio", c.mlp_ratio);
    f.finish();
}

void from_json_into(const json& j, LoRAConfig& c) {
    Fields f(j, "lora");
    f.read("rank", c.rank);
    f.read("alpha", c.alpha);
    f.read("targets", c.targets);
    f.finish();
}

void from_json_into(const json& j, ModelConfig& c) {
    Fields f(j, "model");
    if (const json* s = f.sub("encoder")) from_json_into(*s, c.encoder);
    if (const json* s = f.sub("fusion")) from_json_into(*s, c.fusion);
    if (const json* s = f.sub("decoder")) from_json_into(*s, c.decoder);
    f.read("adapter_hidden", c.adapter_hidden);
    f.read("seed", c.seed);
    f.finish();
}

void from_json_into(const json& j, StageSpec& s) {
    Fields f(j, "stage");
    f.read("stage", s.stage);
    f.read("trainable", s.trainable);
    f.read("frozen", s.frozen);
    f.read("dataset", s.dataset);
    f.read("epochs", s.epochs);
    f.read("batch_size", s.batch_size);
    f.read("lr", s.lr);
    f.read("drop_probability", s.drop_probability);
    f.read("seed", s.seed);
    if (const json* l = f.sub("lora")) {
        if (l->is_null()) {
            s.lora.reset();
        } else {
            LoRAConfig lc;
            from_json_into(*l, lc);
            s.lora = lc;
        }
    }
    f.finish();
}

}  // namespace spatialgeo
