#include "spatialgeo/diagnostics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <map>

#include "spatialgeo/errors.hpp"
#include "spatialgeo/eval.hpp"

namespace spatialgeo {

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ContractError("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw ContractError("cosine_similarity: undefined for a zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<double> mean_pool(const Tensor& tokens) {
    const auto n = tokens.rows(), d = tokens.cols();
    if (n == 0) throw ContractError("mean_pool: no tokens");
    std::vector<double> out(d, 0.0);
    const auto v = tokens.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) out[j] += v[i * d + j];
    }
    for (auto& x : out) x /= static_cast<double>(n);
    return out;
}

std::string EncoderTap::name() const {
    return kind == Kind::Semantic ? "semantic" : "geometry_block" + std::to_string(block);
}

SimilarityProbe SimilarityProbe::all_taps(const EncoderConfig& cfg) {
    SimilarityProbe p;
    p.taps.push_back(EncoderTap::semantic());
    for (std::size_t b = 0; b < cfg.blocks; ++b) p.taps.push_back(EncoderTap::geometry(b));
    return p;
}

std::vector<TapSimilarity> probe_pair(const ImageGrid& a, const ImageGrid& b, const SemanticEncoder& sem,
                                      const GeometryEncoder& geo, const SimilarityProbe& probe) {
    if (a.height() != b.height() || a.width() != b.width()) throw ContractError("probe_pair: images differ in size");
    bool need_geo = false;
    for (const auto& t : probe.taps) need_geo = need_geo || t.kind == EncoderTap::Kind::GeometryBlock;
    BlockFeatures ga, gb;
    if (need_geo) {
        ga = geo.encode(a);
        gb = geo.encode(b);
    }
    std::vector<TapSimilarity> out;
    for (const auto& t : probe.taps) {
        double s = 0.0;
        if (t.kind == EncoderTap::Kind::Semantic) {
            s = cosine_similarity(mean_pool(sem.encode(a)), mean_pool(sem.encode(b)));
        } else {
            if (t.block >= ga.count()) throw ContractError("probe_pair: tap " + t.name() + " beyond encoder depth");
            s = cosine_similarity(mean_pool(ga.blocks[t.block]), mean_pool(gb.blocks[t.block]));
        }
        out.push_back({t.name(), s});
    }
    return out;
}

std::string similarity_csv(const std::vector<PairResult>& pairs) {
    std::string out = "pair_id,tap,similarity\n";
    for (const auto& p : pairs) {
        for (const auto& s : p.similarities) out += p.pair_id + "," + s.tap + "," + format_number(s.similarity) + "\n";
    }
    return out;
}

double mean_similarity(const std::vector<PairResult>& pairs, const std::string& tap) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& p : pairs) {
        for (const auto& s : p.similarities) {
            if (s.tap == tap) {
                total += s.similarity;
                ++n;
            }
        }
    }
    if (n == 0) throw ContractError("mean_similarity: no measurements for tap " + tap);
    return total / static_cast<double>(n);
}

std::string contrast_csv(const std::vector<PairResult>& pairs) {
    std::string out = "tap,mean_similarity,pairs\n";
    if (pairs.empty()) return out;
    for (const auto& s : pairs.front().similarities) {
        out += s.tap + "," + format_number(mean_similarity(pairs, s.tap)) + "," + std::to_string(pairs.size()) + "\n";
    }
    return out;
}

double ridge_probe_r2(const std::vector<std::vector<double>>& features, const std::vector<double>& targets,
                      std::size_t train_count, double lambda) {
    const std::size_t n = features.size();
    if (n != targets.size() || n == 0) throw ContractError("ridge_probe_r2: features/targets mismatch");
    if (train_count == 0 || train_count >= n) throw ContractError("ridge_probe_r2: need both train and test rows");
    const std::size_t d = features[0].size();

    // Centered design with an intercept absorbed by the means.
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    double ymu = 0.0;
    for (std::size_t i = 0; i < train_count; ++i) {
        if (features[i].size() != d) throw ContractError("ridge_probe_r2: ragged features");
        mu += Eigen::Map<const Eigen::VectorXd>(features[i].data(), static_cast<Eigen::Index>(d));
        ymu += targets[i];
    }
    mu /= static_cast<double>(train_count);
    ymu /= static_cast<double>(train_count);
    Eigen::MatrixXd X(static_cast<Eigen::Index>(train_count), static_cast<Eigen::Index>(d));
    Eigen::VectorXd y(static_cast<Eigen::Index>(train_count));
    for (std::size_t i = 0; i < train_count; ++i) {
        X.row(static_cast<Eigen::Index>(i)) =
            Eigen::Map<const Eigen::VectorXd>(features[i].data(), static_cast<Eigen::Index>(d)) - mu;
        y(static_cast<Eigen::Index>(i)) = targets[i] - ymu;
    }
    // Dual form: w = X^T (X X^T + lambda I)^-1 y, cheap when rows < features.
    Eigen::MatrixXd K = X * X.transpose();
    K.diagonal().array() += lambda;
    const Eigen::VectorXd alpha = K.ldlt().solve(y);
    const Eigen::VectorXd w = X.transpose() * alpha;

    double sse = 0.0, sst = 0.0, tmu = 0.0;
    for (std::size_t i = train_count; i < n; ++i) tmu += targets[i];
    tmu /= static_cast<double>(n - train_count);
    for (std::size_t i = train_count; i < n; ++i) {
        const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(features[i].data(), static_cast<Eigen::Index>(d)) - mu;
        const double pred = ymu + w.dot(x);
        sse += (targets[i] - pred) * (targets[i] - pred);
        sst += (targets[i] - tmu) * (targets[i] - tmu);
    }
    if (sst == 0.0) return 0.0;
    return 1.0 - sse / sst;
}

}  // namespace spatialgeo
