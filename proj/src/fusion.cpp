#include "spatialgeo/fusion.hpp"

#include <cmath>

#include "spatialgeo/errors.hpp"

namespace spatialgeo {

const char* to_string(BranchTag t) {
    switch (t) {
        case BranchTag::Semantic: return "semantic";
        case BranchTag::Geometry: return "geometry";
        case BranchTag::Text: return "text";
    }
    return "?";
}

std::size_t EmbeddingSequence::count(BranchTag t) const {
    return static_cast<std::size_t>(std::count(tags.begin(), tags.end(), t));
}

void EmbeddingSequence::validate() const {
    if (!tokens.defined() || tokens.dim() != 2) throw ContractError("EmbeddingSequence: tokens must be a 2-D tensor");
    if (tokens.rows() != tags.size() || dropped.size() != tags.size()) {
        throw ContractError("EmbeddingSequence: tags/mask length does not match token count");
    }
    const auto w = tokens.cols();
    const auto d = tokens.data();
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (!dropped[i]) continue;
        for (std::size_t j = 0; j < w; ++j) {
            if (d[i * w + j] != 0.0) throw ContractError("EmbeddingSequence: dropped token is not a zero vector");
        }
    }
}

Adapter Adapter::create(ParamSet& params, const std::string& prefix, std::size_t in, std::size_t hidden,
                        std::size_t out, Rng& rng) {
    Adapter a;
    a.w1 = params.add(prefix + ".w1", Tensor::randn({in, hidden}, rng, 1.0 / std::sqrt(static_cast<double>(in))));
    a.b1 = params.add(prefix + ".b1", Tensor::zeros({hidden}));
    a.w2 = params.add(prefix + ".w2",
                      Tensor::randn({hidden, out}, rng, 1.0 / std::sqrt(static_cast<double>(hidden))));
    a.b2 = params.add(prefix + ".b2", Tensor::zeros({out}));
    return a;
}

Adapter Adapter::bind(ParamSet& params, const std::string& prefix) {
    Adapter a{params.get(prefix + ".w1"), params.get(prefix + ".b1"), params.get(prefix + ".w2"),
              params.get(prefix + ".b2")};
    if (a.b1.numel() != a.hidden_dim() || a.w2.rows() != a.hidden_dim() || a.b2.numel() != a.out_dim()) {
        throw ConfigError("adapter '" + prefix + "' has inconsistent parameter shapes");
    }
    return a;
}

Tensor adapter_forward(const Adapter& a, const Tensor& x) {
    if (x.dim() != 2 || x.cols() != a.in_dim()) {
        throw ContractError("adapter_forward: input " + shape_str(x.shape()) + " does not match adapter input width " +
                            std::to_string(a.in_dim()));
    }
    return add_bias(matmul(gelu(add_bias(matmul(x, a.w1), a.b1)), a.w2), a.b2);
}

HierarchicalAdapter HierarchicalAdapter::create(ParamSet& params, std::size_t depth, std::size_t block_count,
                                                std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    if (depth == 0 || depth > block_count) {
        throw ConfigError("hierarchical adapter depth " + std::to_string(depth) + " invalid for " +
                          std::to_string(block_count) + " encoder blocks");
    }
    HierarchicalAdapter h;
    for (std::size_t k = 0; k < depth; ++k) {
        h.sub_adapters.push_back(
            Adapter::create(params, kHierAdapterPrefix + "." + std::to_string(k), in, hidden, out, rng));
        h.tapped_blocks.push_back(block_count - 1 - k);
    }
    return h;
}

HierarchicalAdapter HierarchicalAdapter::bind(ParamSet& params, std::size_t depth, std::size_t block_count) {
    if (depth == 0 || depth > block_count) throw ConfigError("hierarchical adapter depth invalid");
    HierarchicalAdapter h;
    for (std::size_t k = 0; k < depth; ++k) {
        h.sub_adapters.push_back(Adapter::bind(params, kHierAdapterPrefix + "." + std::to_string(k)));
        h.tapped_blocks.push_back(block_count - 1 - k);
    }
    return h;
}

Tensor hierarchical_forward(const HierarchicalAdapter& h, const BlockFeatures& blocks) {
    if (h.sub_adapters.empty() || h.sub_adapters.size() != h.tapped_blocks.size()) {
        throw ContractError("hierarchical_forward: sub-adapter and tap lists disagree");
    }
    Tensor total;
    for (std::size_t k = 0; k < h.depth(); ++k) {
        const auto b = h.tapped_blocks[k];
        if (b >= blocks.count()) {
            throw ContractError("hierarchical_forward: tapped block " + std::to_string(b) + " but encoder has " +
                                std::to_string(blocks.count()));
        }
        Tensor y = adapter_forward(h.sub_adapters[k], blocks.blocks[b]);
        if (total.defined() && y.shape() != total.shape()) {
            throw ContractError("hierarchical_forward: sub-adapter outputs disagree in shape");
        }
        total = total.defined() ? add(total, y) : y;
    }
    return total;
}

void FusionConfig::validate() const {
    if (!(drop_probability >= 0.0 && drop_probability <= 1.0)) {
        throw ConfigError("drop_probability must lie in [0, 1]");
    }
    if (hier_depth == 0) throw ConfigError("hier_depth must be at least 1");
    if (!clip_branch_enabled && !geometry_branch_enabled) throw ConfigError("at least one visual branch is required");
}

EmbeddingSequence interleave(const Tensor& semantic, const Tensor& geometry, InterleaveOrder order) {
    if (semantic.dim() != 2 || geometry.dim() != 2 || semantic.shape() != geometry.shape()) {
        throw ContractError("interleave: branches must have identical [tokens x dim] shapes, got " +
                            shape_str(semantic.shape()) + " and " + shape_str(geometry.shape()));
    }
    const std::size_t n = semantic.rows();
    const bool sem_first = order == InterleaveOrder::SemanticFirst;
    const Tensor parts[2] = {sem_first ? semantic : geometry, sem_first ? geometry : semantic};
    // Rows 0..n-1 are the leading branch, n..2n-1 the trailing one.
    std::vector<std::size_t> perm(2 * n);
    for (std::size_t k = 0; k < n; ++k) {
        perm[2 * k] = k;
        perm[2 * k + 1] = n + k;
    }
    EmbeddingSequence seq;
    seq.tokens = gather_rows(concat_rows(parts), perm);
    const BranchTag lead = sem_first ? BranchTag::Semantic : BranchTag::Geometry;
    const BranchTag trail = sem_first ? BranchTag::Geometry : BranchTag::Semantic;
    for (std::size_t k = 0; k < n; ++k) {
        seq.tags.push_back(lead);
        seq.tags.push_back(trail);
    }
    seq.dropped.assign(2 * n, false);
    return seq;
}

std::pair<Tensor, Tensor> deinterleave(const EmbeddingSequence& seq) {
    std::vector<std::size_t> sem, geo;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq.tags[i] == BranchTag::Semantic) sem.push_back(i);
        if (seq.tags[i] == BranchTag::Geometry) geo.push_back(i);
    }
    if (sem.size() != geo.size() || sem.size() + geo.size() != seq.size()) {
        throw ContractError("deinterleave: sequence is not a two-branch interleaving");
    }
    return {gather_rows(seq.tokens, sem), gather_rows(seq.tokens, geo)};
}

EmbeddingSequence geometry_only(const Tensor& geometry) {
    EmbeddingSequence seq;
    seq.tokens = geometry;
    seq.tags.assign(geometry.rows(), BranchTag::Geometry);
    seq.dropped.assign(geometry.rows(), false);
    return seq;
}

EmbeddingSequence drop_clip_mask(const EmbeddingSequence& seq, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return seq;
    if (!rng.bernoulli(p)) return seq;
    std::vector<bool> keep(seq.size());
    EmbeddingSequence out = seq;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        keep[i] = seq.tags[i] != BranchTag::Semantic;
        if (!keep[i]) out.dropped[i] = true;
    }
    out.tokens = mask_rows(seq.tokens, keep);
    return out;
}

VisualFeatures encode_image(const ImageGrid& img, const SemanticEncoder& sem, const GeometryEncoder& geo) {
    if (sem.config().num_tokens() != geo.config().num_tokens()) {
        throw ConfigError("semantic and geometry encoders must produce the same token count");
    }
    return {sem.encode(img), geo.encode(img)};
}

EmbeddingSequence build_visual_embedding(const VisualFeatures& features, const Adapter& clip_adapter,
                                         const HierarchicalAdapter& hier, const FusionConfig& cfg, Rng* rng,
                                         bool training) {
    cfg.validate();
    Tensor geo;
    if (cfg.geometry_branch_enabled) {
        geo = hierarchical_forward(hier, features.geometry);
    } else {
        geo = Tensor::zeros({features.semantic.rows(), clip_adapter.out_dim()});
    }
    if (!cfg.clip_branch_enabled) return geometry_only(geo);

    EmbeddingSequence seq = interleave(adapter_forward(clip_adapter, features.semantic), geo, cfg.interleave_order);
    if (training && cfg.drop_probability > 0.0) {
        if (rng == nullptr) throw ContractError("build_visual_embedding: training with dropping needs an RNG");
        seq = drop_clip_mask(seq, cfg.drop_probability, *rng, true);
    }
    return seq;
}

EmbeddingSequence build_visual_embedding(const ImageGrid& img, const SemanticEncoder& sem,
                                         const GeometryEncoder& geo, const Adapter& clip_adapter,
                                         const HierarchicalAdapter& hier, const FusionConfig& cfg, Rng* rng,
                                         bool training) {
    return build_visual_embedding(encode_image(img, sem, geo), clip_adapter, hier, cfg, rng, training);
}

}  // namespace spatialgeo
