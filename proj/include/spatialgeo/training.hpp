#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "spatialgeo/model.hpp"
#include "spatialgeo/params.hpp"

namespace spatialgeo {

// Selectors are name prefixes matched with has_prefix ("lm" covers lm.*).
struct StageSpec {
    int stage = 1;
    std::vector<std::string> trainable;
    std::vector<std::string> frozen;
    std::string dataset;
    std::size_t epochs = 20;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    double drop_probability = 0.0;
    std::optional<LoRAConfig> lora;
    std::uint64_t seed = 1;

    // Stage 1: hierarchical adapter only.
    static StageSpec stage1();
    // Stage 2: both adapters and the LM, dropping at 0.3.
    static StageSpec stage2();

    // Static checks that need no model: stage id, ranges, reserved selectors,
    // overlapping selector lists, stage-1 freeze rules.
    void validate() const;
};

// Resolves the StageSpec selectors against the model's parameter names, validates, and
// sets the frozen flags. Names matched by no trainable selector are frozen.
// With LoRA active only the lora_a/lora_b tensors of lm.* stay trainable.
void apply_stage_freeze(SpatialGeoModel& model, const StageSpec& spec);

struct LossEntry {
    std::uint64_t step = 0;
    int stage = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    double drop_rate = 0.0;  // fraction of samples in the batch with the CLIP branch dropped

    friend bool operator==(const LossEntry&, const LossEntry&) = default;
};

struct TrainState {
    int stage = 0;
    std::size_t epoch = 0;  // completed epochs in this stage
    std::uint64_t step = 0;
    AdamW optimizer;
    Rng rng;  // shuffling stream
    std::vector<LossEntry> history;
};

TrainState begin_stage(const StageSpec& spec);

// Called after every completed epoch, e.g. to write a checkpoint.
using EpochHook = std::function<void(const SpatialGeoModel&, const TrainState&)>;

// Both runners continue from `resume` when given (it must belong to the same
// stage), otherwise start from begin_stage(spec).
TrainState run_stage1(const StageSpec& spec, SpatialGeoModel& model, const std::vector<Sample>& data,
                      const EpochHook& hook = {}, std::optional<TrainState> resume = std::nullopt);
// Throws StateError unless the model has completed stage 1. Enables LoRA on
// the model when the StageSpec asks for it and it is not active yet.
TrainState run_stage2(const StageSpec& spec, SpatialGeoModel& model, const std::vector<Sample>& data,
                      const EpochHook& hook = {}, std::optional<TrainState> resume = std::nullopt);

// step,stage,epoch,loss,drop_rate
std::string loss_log_csv(const std::vector<LossEntry>& history);

struct LoadedCheckpoint {
    std::unique_ptr<SpatialGeoModel> model;
    TrainState state;
};

std::string encode_model_checkpoint(const SpatialGeoModel& model, const TrainState& state);
LoadedCheckpoint decode_model_checkpoint(const std::string& bytes);
void save_checkpoint(const SpatialGeoModel& model, const TrainState& state, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// JSON config surface. Missing keys keep their defaults; unknown keys and
// wrong types raise ConfigError.
nlohmann::json to_json(const EncoderConfig& c);
nlohmann::json to_json(const FusionConfig& c);
nlohmann::json to_json(const DecoderConfig& c);
nlohmann::json to_json(const LoRAConfig& c);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const StageSpec& s);
void from_json_into(const nlohmann::json& j, EncoderConfig& c);
void from_json_into(const nlohmann::json& j, FusionConfig& c);
void from_json_into(const nlohmann::json& j, DecoderConfig& c);
void from_json_into(const nlohmann::json& j, LoRAConfig& c);
void from_json_into(const nlohmann::json& j, ModelConfig& c);
void from_json_into(const nlohmann::json& j, StageSpec& s);

}  // namespace spatialgeo
