#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace spatialgeo {

// splitmix64 finalizer; used to derive independent stream seeds from (seed, tags...).
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed) { return mix_seed(seed); }

template <typename... Rest>
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, Rest... rest) {
    return derive_seed(mix_seed(seed ^ mix_seed(tag)), static_cast<std::uint64_t>(rest)...);
}

// Seeded generator with platform-stable sampling. std:: distributions are
// implementation-defined, so uniform/normal are derived from raw 64-bit draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    double normal();

    bool bernoulli(double p) { return uniform() < p; }

    std::string state() const;
    void set_state(const std::string& s);

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace spatialgeo
