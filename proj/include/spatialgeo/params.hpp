#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "spatialgeo/tensor.hpp"

namespace spatialgeo {

bool has_prefix(std::string_view name, std::string_view prefix);

// FNV-1a over the raw bytes of the values; stable across runs and platforms
// with IEEE-754 doubles.
std::uint64_t checksum(std::span<const double> values);

// Named parameters plus the set of frozen names. Tensors are shared handles,
// so modules may keep their own references to entries in the set.
class ParamSet {
public:
    // Registers a new parameter; requires_grad follows the frozen flag.
    Tensor& add(const std::string& name, Tensor t, bool frozen = false);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    void erase(const std::string& name);

    void freeze(const std::string& name);
    void unfreeze(const std::string& name);
    void freeze_prefix(std::string_view prefix);
    void unfreeze_prefix(std::string_view prefix);
    void freeze_all();
    bool is_frozen(const std::string& name) const { return frozen_.count(name) != 0; }

    std::vector<std::string> names() const;
    std::vector<std::string> names_with_prefix(std::string_view prefix) const;
    std::size_t size() const { return params_.size(); }
    const std::map<std::string, Tensor>& items() const { return params_; }
    const std::set<std::string>& frozen() const { return frozen_; }

    std::size_t trainable_count() const;

    // Allocates zeroed grads on every trainable parameter.
    void zero_grad();

    // Checksum over all parameters whose name starts with prefix, in name order.
    std::uint64_t checksum_prefix(std::string_view prefix) const;

    // Deep copy: fresh storage for every tensor.
    ParamSet clone() const;

    // Copies values from other into the existing tensors (shapes must match).
    void assign_values(const ParamSet& other);

private:
    std::map<std::string, Tensor> params_;
    std::set<std::string> frozen_;
};

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam. Frozen parameters are skipped entirely, so
// their bits never change no matter what their grads hold.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamSet& params);

    const AdamWConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::uint64_t steps() const { return t_; }

    // Optimizer moments, keyed by parameter name.
    const std::map<std::string, std::vector<double>>& first_moments() const { return m_; }
    const std::map<std::string, std::vector<double>>& second_moments() const { return v_; }
    void restore(std::uint64_t t, std::map<std::string, std::vector<double>> m,
                 std::map<std::string, std::vector<double>> v);

private:
    AdamWConfig cfg_;
    std::uint64_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace spatialgeo
