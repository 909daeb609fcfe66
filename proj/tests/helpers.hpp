#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "spatialgeo/tensor.hpp"

namespace testing {

// Random weights make a weighted-sum loss whose gradient is generic (no
// coordinate sits near zero), which keeps relative FD errors meaningful.
inline spatialgeo::Tensor weighted_sum(const spatialgeo::Tensor& y, const spatialgeo::Tensor& w) {
    return spatialgeo::sum(spatialgeo::mul(y, w));
}

inline bool bit_equal(const spatialgeo::Tensor& a, const spatialgeo::Tensor& b) {
    if (a.shape() != b.shape()) return false;
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(x[i]) != std::bit_cast<std::uint64_t>(y[i])) return false;
    }
    return true;
}

inline double max_abs_diff(const spatialgeo::Tensor& a, const spatialgeo::Tensor& b) {
    double m = 0.0;
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
    return m;
}

// Fresh scratch directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("spatialgeo_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testing
