#include "spatialgeo/params.hpp"

#include <cmath>
#include <cstring>

#include "spatialgeo/errors.hpp"

namespace spatialgeo {

bool has_prefix(std::string_view name, std::string_view prefix) {
    return name.substr(0, prefix.size()) == prefix;
}

std::uint64_t checksum(std::span<const double> values) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : values) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char b : bytes) {
            h ^= b;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

Tensor& ParamSet::add(const std::string& name, Tensor t, bool frozen) {
    if (name.empty()) throw ConfigError("ParamSet::add: empty parameter name");
    if (contains(name)) throw ConfigError("ParamSet::add: duplicate parameter '" + name + "'");
    if (!t.defined()) throw ContractError("ParamSet::add: undefined tensor for '" + name + "'");
    t.set_requires_grad(!frozen);
    if (frozen) frozen_.insert(name);
    return params_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamSet::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
}

const Tensor& ParamSet::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
}

void ParamSet::erase(const std::string& name) {
    if (!params_.erase(name)) throw ConfigError("unknown parameter '" + name + "'");
    frozen_.erase(name);
}

void ParamSet::freeze(const std::string& name) {
    get(name).set_requires_grad(false);
    frozen_.insert(name);
}

void ParamSet::unfreeze(const std::string& name) {
    get(name).set_requires_grad(true);
    frozen_.erase(name);
}

void ParamSet::freeze_prefix(std::string_view prefix) {
    for (const auto& n : names_with_prefix(prefix)) freeze(n);
}

void ParamSet::unfreeze_prefix(std::string_view prefix) {
    for (const auto& n : names_with_prefix(prefix)) unfreeze(n);
}

void ParamSet::freeze_all() { freeze_prefix(""); }

std::vector<std::string> ParamSet::names() const { return names_with_prefix(""); }

std::vector<std::string> ParamSet::names_with_prefix(std::string_view prefix) const {
    std::vector<std::string> out;
    for (const auto& [n, _] : params_) {
        if (has_prefix(n, prefix)) out.push_back(n);
    }
    return out;
}

std::size_t ParamSet::trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) {
        if (!is_frozen(name)) n += t.numel();
    }
    return n;
}

void ParamSet::zero_grad() {
    for (auto& [name, t] : params_) {
        if (is_frozen(name)) {
            t.clear_grad();
        } else {
            t.zero_grad();
        }
    }
}

std::uint64_t ParamSet::checksum_prefix(std::string_view prefix) const {
    std::uint64_t h = 0x84222325cbf29ce4ULL;
    for (const auto& [n, t] : params_) {
        if (!has_prefix(n, prefix)) continue;
        for (char c : n) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
        h = mix_seed(h ^ checksum(t.data()));
    }
    return h;
}

ParamSet ParamSet::clone() const {
    ParamSet out;
    for (const auto& [n, t] : params_) out.add(n, t.detach(), is_frozen(n));
    return out;
}

void ParamSet::assign_values(const ParamSet& other) {
    for (const auto& [n, src] : other.params_) {
        auto& dst = get(n);
        if (dst.shape() != src.shape()) {
            throw DimensionError("assign_values: shape mismatch for '" + n + "': " + shape_str(dst.shape()) +
                                 " vs " + shape_str(src.shape()));
        }
        auto d = dst.mutable_data();
        std::copy(src.data().begin(), src.data().end(), d.begin());
    }
}

void AdamW::step(ParamSet& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& name : params.names()) {
        if (params.is_frozen(name)) continue;
        auto& p = params.get(name);
        if (!p.has_grad()) throw ContractError("AdamW::step: parameter '" + name + "' has no gradient");
        auto w = p.mutable_data();
        auto g = p.grad();
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.size() != w.size()) {
            m.assign(w.size(), 0.0);
            v.assign(w.size(), 0.0);
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
    }
}

void AdamW::restore(std::uint64_t t, std::map<std::string, std::vector<double>> m,
                    std::map<std::string, std::vector<double>> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

}  // namespace spatialgeo
