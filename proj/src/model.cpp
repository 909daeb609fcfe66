#include "spatialgeo/model.hpp"

#include "spatialgeo/errors.hpp"

namespace spatialgeo {

void ModelConfig::validate() const {
    encoder.validate();
    fusion.validate();
    decoder.validate();
    if (fusion.hier_depth > encoder.blocks) throw ConfigError("hier_depth exceeds the number of geometry blocks");
    const std::size_t visual = (fusion.clip_branch_enabled ? 2 : 1) * encoder.num_tokens();
    if (decoder.max_len <= visual) throw ConfigError("decoder max_len leaves no room for text after the visual tokens");
}

SpatialGeoModel::SpatialGeoModel(ModelConfig cfg, Vocab vocab)
    : cfg_(cfg), vocab_(std::move(vocab)), sem_(cfg.encoder), geo_(cfg.encoder) {
    cfg_.decoder.vocab_size = vocab_.size();
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, 0xadab7e5));
    const auto d = cfg_.decoder.dim, h = cfg_.hidden();
    Adapter::create(params_, kClipAdapterPrefix, cfg_.encoder.semantic_dim, h, d, rng);
    HierarchicalAdapter::create(params_, cfg_.fusion.hier_depth, cfg_.encoder.blocks, cfg_.encoder.geometry_dim, h, d, rng);
    Rng lm_rng(derive_seed(cfg_.seed, 0x1a4));
    Decoder::create(params_, cfg_.decoder, lm_rng);
}

std::uint64_t SpatialGeoModel::encoder_checksum() const { return mix_seed(sem_.checksum() ^ mix_seed(geo_.checksum())); }

Adapter SpatialGeoModel::clip_adapter() { return Adapter::bind(params_, kClipAdapterPrefix); }

HierarchicalAdapter SpatialGeoModel::hier_adapter() {
    return HierarchicalAdapter::bind(params_, cfg_.fusion.hier_depth, cfg_.encoder.blocks);
}

Decoder SpatialGeoModel::decoder() { return Decoder::bind(params_, cfg_.decoder); }

void SpatialGeoModel::enable_lora(const LoRAConfig& cfg, std::uint64_t seed) {
    if (lora_) throw ConfigError("LoRA already enabled on this model");
    cfg.validate(cfg_.decoder.dim);
    Rng rng(derive_seed(seed, 0x10ea));
    lora_wrap(params_, cfg, rng);
    lora_ = cfg;
}

Sample SpatialGeoModel::make_sample(const VQARecord& record, const SynthConfig& synth) const {
    Sample s;
    s.id = record.id;
    ImageGrid img;
    if (record.scene) {
        img = render_scene(*record.scene, synth);
    } else {
        img = read_ppm(record.image);
    }
    img = resize_to_square(img, cfg_.encoder.image_side);
    s.features = encode_image(img, sem_, geo_);
    s.prompt.push_back(vocab_.bos());
    for (auto id : vocab_.encode(record.question)) s.prompt.push_back(id);
    s.answer = vocab_.encode(record.answer);
    s.answer.push_back(vocab_.eos());
    s.category = record.category;
    s.ground_truth = record.ground_truth;
    return s;
}

std::vector<Sample> SpatialGeoModel::make_samples(const std::vector<VQARecord>& records, const SynthConfig& synth) const {
    std::vector<Sample> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(make_sample(r, synth));
    return out;
}

EmbeddingSequence SpatialGeoModel::prompt_input(const Sample& s, Rng* rng, bool training) {
    EmbeddingSequence vis = build_visual_embedding(s.features, clip_adapter(), hier_adapter(), cfg_.fusion, rng, training);
    return splice_input(vis, decoder().embed_text(s.prompt));
}

Tensor SpatialGeoModel::loss(const Sample& s, Rng* rng, bool training, bool* dropped) {
    EmbeddingSequence h_in = prompt_input(s, rng, training);
    if (dropped) *dropped = std::find(h_in.dropped.begin(), h_in.dropped.end(), true) != h_in.dropped.end();
    return decoder().autoregressive_loss(h_in, s.answer);
}

std::string SpatialGeoModel::answer(const Sample& s, std::size_t max_new) {
    NoGradGuard guard;
    EmbeddingSequence h_in = prompt_input(s, nullptr, false);
    return vocab_.decode(decoder().generate_greedy(h_in, max_new, vocab_.eos()));
}

}  // namespace spatialgeo
