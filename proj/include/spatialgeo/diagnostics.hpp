#pragma once

#include <span>
#include <string>
#include <vector>

#include "spatialgeo/encoders.hpp"

namespace spatialgeo {

// a . b / (|a| |b|); throws ContractError on a zero vector or length mismatch.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Column means of a [tokens x dim] tensor.
std::vector<double> mean_pool(const Tensor& tokens);

struct EncoderTap {
    enum class Kind { Semantic, GeometryBlock } kind = Kind::Semantic;
    std::size_t block = 0;  // 0-based, GeometryBlock only

    std::string name() const;
    static EncoderTap semantic() { return {Kind::Semantic, 0}; }
    static EncoderTap geometry(std::size_t block) { return {Kind::GeometryBlock, block}; }
};

struct SimilarityProbe {
    std::vector<EncoderTap> taps;

    // Semantic encoder plus every geometry block.
    static SimilarityProbe all_taps(const EncoderConfig& cfg);
};

struct TapSimilarity {
    std::string tap;
    double similarity = 0.0;
};

// Mean-pooled features per tap, cosine similarity per tap.
std::vector<TapSimilarity> probe_pair(const ImageGrid& a, const ImageGrid& b, const SemanticEncoder& sem,
                                      const GeometryEncoder& geo, const SimilarityProbe& probe);

struct PairResult {
    std::string pair_id;
    std::vector<TapSimilarity> similarities;
};

// pair_id,tap,similarity
std::string similarity_csv(const std::vector<PairResult>& pairs);
// tap,mean_similarity,pairs
std::string contrast_csv(const std::vector<PairResult>& pairs);
double mean_similarity(const std::vector<PairResult>& pairs, const std::string& tap);

// Ridge regression fitted on the first train_count rows of features and
// evaluated on the rest. Returns held-out R^2 (1 - SSE / SST); a constant
// target slice gives R^2 = 0 by convention.
double ridge_probe_r2(const std::vector<std::vector<double>>& features, const std::vector<double>& targets,
                      std::size_t train_count, double lambda = 1e-3);

}  // namespace spatialgeo
