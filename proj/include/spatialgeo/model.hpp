#pragma once

#include <optional>
#include <string>

#include "spatialgeo/data.hpp"
#include "spatialgeo/encoders.hpp"
#include "spatialgeo/fusion.hpp"
#include "spatialgeo/lm.hpp"

namespace spatialgeo {

struct ModelConfig {
    EncoderConfig encoder;
    FusionConfig fusion;
    DecoderConfig decoder;
    std::size_t adapter_hidden = 0;  // 0 means decoder.dim
    std::uint64_t seed = 1;

    std::size_t hidden() const { return adapter_hidden ? adapter_hidden : decoder.dim; }
    void validate() const;
};

// One training/eval example with the frozen encoder outputs precomputed.
struct Sample {
    std::string id;
    VisualFeatures features;
    TokenIds prompt;  // <bos> + question tokens
    TokenIds answer;  // answer tokens + <eos>
    QuestionCategory category = QuestionCategory::Height;
    std::optional<Quantity> ground_truth;
};

// Frozen encoders + clip adapter + hierarchical adapter + toy decoder.
// All trainable state lives in params() under clip_adapter.*, hier_adapter.*
// and lm.*; encoder weights are regenerated from the encoder seed.
class SpatialGeoModel {
public:
    explicit SpatialGeoModel(ModelConfig cfg, Vocab vocab = Vocab::standard());

    SpatialGeoModel(const SpatialGeoModel&) = delete;
    SpatialGeoModel& operator=(const SpatialGeoModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ModelConfig& mutable_config() { return cfg_; }
    const Vocab& vocab() const { return vocab_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    const SemanticEncoder& semantic_encoder() const { return sem_; }
    const GeometryEncoder& geometry_encoder() const { return geo_; }
    std::uint64_t encoder_checksum() const;

    Adapter clip_adapter();
    HierarchicalAdapter hier_adapter();
    Decoder decoder();

    void enable_lora(const LoRAConfig& cfg, std::uint64_t seed);
    const std::optional<LoRAConfig>& lora() const { return lora_; }

    // Highest training stage completed on these parameters (0 = fresh init).
    int completed_stage() const { return completed_stage_; }
    void set_completed_stage(int s) { completed_stage_ = s; }

    Sample make_sample(const VQARecord& record, const SynthConfig& synth = {}) const;
    std::vector<Sample> make_samples(const std::vector<VQARecord>& records, const SynthConfig& synth = {}) const;

    EmbeddingSequence prompt_input(const Sample& s, Rng* rng, bool training);
    // Teacher-forced loss for one sample; *dropped reports whether the CLIP
    // branch was masked for this sample.
    Tensor loss(const Sample& s, Rng* rng, bool training, bool* dropped = nullptr);
    std::string answer(const Sample& s, std::size_t max_new = 8);

private:
    ModelConfig cfg_;
    Vocab vocab_;
    SemanticEncoder sem_;
    GeometryEncoder geo_;
    ParamSet params_;
    std::optional<LoRAConfig> lora_;
    int completed_stage_ = 0;
};

}  // namespace spatialgeo
