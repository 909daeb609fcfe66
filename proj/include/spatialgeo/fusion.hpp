#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spatialgeo/encoders.hpp"
#include "spatialgeo/params.hpp"

namespace spatialgeo {

enum class BranchTag { Semantic, Geometry, Text };

const char* to_string(BranchTag t);

// Token rows of width D, one branch tag and one drop flag per row.
// Dropped rows are exact zero vectors.
struct EmbeddingSequence {
    Tensor tokens;
    std::vector<BranchTag> tags;
    std::vector<bool> dropped;

    std::size_t size() const { return tags.size(); }
    std::size_t width() const { return tokens.cols(); }
    std::size_t count(BranchTag t) const;
    // Throws ContractError when the tag/mask/token bookkeeping disagrees.
    void validate() const;
};

// Two-layer MLP with GELU in between: W2 * gelu(W1 x + b1) + b2, row-wise.
struct Adapter {
    Tensor w1, b1, w2, b2;

    std::size_t in_dim() const { return w1.rows(); }
    std::size_t hidden_dim() const { return w1.cols(); }
    std::size_t out_dim() const { return w2.cols(); }

    // Registers prefix.{w1,b1,w2,b2} in params.
    static Adapter create(ParamSet& params, const std::string& prefix, std::size_t in, std::size_t hidden,
                          std::size_t out, Rng& rng);
    // Binds to tensors already present in params.
    static Adapter bind(ParamSet& params, const std::string& prefix);
};

Tensor adapter_forward(const Adapter& a, const Tensor& x);

// Sub-adapter k reads geometry block tapped_blocks[k] (0-based); outputs are summed.
struct HierarchicalAdapter {
    std::vector<Adapter> sub_adapters;
    std::vector<std::size_t> tapped_blocks;

    std::size_t depth() const { return sub_adapters.size(); }

    // depth sub-adapters over the last depth blocks: sub-adapter k taps block
    // (block_count - 1 - k). depth 1 is the single-adapter variant.
    static HierarchicalAdapter create(ParamSet& params, std::size_t depth, std::size_t block_count, std::size_t in,
                                      std::size_t hidden, std::size_t out, Rng& rng);
    static HierarchicalAdapter bind(ParamSet& params, std::size_t depth, std::size_t block_count);
};

inline const std::string kClipAdapterPrefix = "clip_adapter";
inline const std::string kHierAdapterPrefix = "hier_adapter";

Tensor hierarchical_forward(const HierarchicalAdapter& h, const BlockFeatures& blocks);

enum class InterleaveOrder { SemanticFirst, GeometryFirst };

struct FusionConfig {
    double drop_probability = 0.3;
    InterleaveOrder interleave_order = InterleaveOrder::SemanticFirst;
    bool clip_branch_enabled = true;
    // Ablation only: replaces the geometry tokens by zeros.
    bool geometry_branch_enabled = true;
    std::size_t hier_depth = 4;

    void validate() const;
};

// Token 2k comes from the leading branch, token 2k+1 from the other one.
EmbeddingSequence interleave(const Tensor& semantic, const Tensor& geometry,
                             InterleaveOrder order = InterleaveOrder::SemanticFirst);

// Inverse of interleave: (semantic rows, geometry rows) in original order.
std::pair<Tensor, Tensor> deinterleave(const EmbeddingSequence& seq);

EmbeddingSequence geometry_only(const Tensor& geometry);

// One Bernoulli(p) draw per call (per sample). On success every semantic row
// is zeroed and flagged; geometry and text rows are never touched. Never
// drops when training is false, and draws nothing in that case.
EmbeddingSequence drop_clip_mask(const EmbeddingSequence& seq, double p, Rng& rng, bool training);

// Frozen encoder outputs for one image. Encoders never train, so callers may
// compute these once and reuse them across epochs.
struct VisualFeatures {
    Tensor semantic;
    BlockFeatures geometry;
};

VisualFeatures encode_image(const ImageGrid& img, const SemanticEncoder& sem, const GeometryEncoder& geo);

// Adapters + interleaving + (training-time) dropping. rng may be null when
// training is false.
EmbeddingSequence build_visual_embedding(const VisualFeatures& features, const Adapter& clip_adapter,
                                         const HierarchicalAdapter& hier, const FusionConfig& cfg, Rng* rng,
                                         bool training);

EmbeddingSequence build_visual_embedding(const ImageGrid& img, const SemanticEncoder& sem,
                                         const GeometryEncoder& geo, const Adapter& clip_adapter,
                                         const HierarchicalAdapter& hier, const FusionConfig& cfg, Rng* rng,
                                         bool training);

}  // namespace spatialgeo
