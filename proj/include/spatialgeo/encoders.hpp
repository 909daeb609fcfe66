#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "spatialgeo/tensor.hpp"

namespace spatialgeo {

// H x W x 3 image, channel-interleaved, values in [0, 1].
//
// Channels 0 and 1 carry appearance; channel 2 is the designated geometry
// channel (a depth-like cue) of the synthetic scenes.
class ImageGrid {
public:
    static constexpr std::size_t kChannels = 3;
    static constexpr std::size_t kGeometryChannel = 2;

    ImageGrid() = default;
    ImageGrid(std::size_t height, std::size_t width, double fill = 0.0);
    ImageGrid(std::size_t height, std::size_t width, std::vector<double> values);

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    bool empty() const { return values_.empty(); }

    double at(std::size_t y, std::size_t x, std::size_t c) const { return values_[(y * width_ + x) * kChannels + c]; }
    void set(std::size_t y, std::size_t x, std::size_t c, double v);
    std::span<const double> values() const { return values_; }

    friend bool operator==(const ImageGrid&, const ImageGrid&) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<double> values_;
};

// Bilinear resize with half-pixel centers and edge clamping.
ImageGrid resize_to_square(const ImageGrid& img, std::size_t side);

// Binary PPM (P6, maxval 255) and ASCII PPM (P3) are accepted on read.
ImageGrid read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const ImageGrid& img);

struct EncoderConfig {
    std::size_t patch_size = 8;
    std::size_t image_side = 32;
    std::size_t semantic_dim = 32;
    std::size_t geometry_dim = 32;
    std::size_t blocks = 6;
    std::uint64_t seed = 7;

    std::size_t grid() const { return image_side / patch_size; }
    std::size_t num_tokens() const { return grid() * grid(); }
    void validate() const;
};

// Per-block geometry features; every block is [num_tokens x geometry_dim].
struct BlockFeatures {
    std::vector<Tensor> blocks;

    std::size_t count() const { return blocks.size(); }
    const Tensor& last() const { return blocks.back(); }
};

// Frozen stand-in for the CLIP encoder: seeded linear patch projection of the
// appearance channels plus a fixed positional offset. Blind to the geometry
// channel, which is what makes spatially different scenes collide.
class SemanticEncoder {
public:
    explicit SemanticEncoder(const EncoderConfig& cfg);

    Tensor encode(const ImageGrid& img) const;
    const EncoderConfig& config() const { return cfg_; }
    std::uint64_t checksum() const;

private:
    EncoderConfig cfg_;
    Tensor projection_;  // [patch * patch * 2 x semantic_dim]
    Tensor position_;    // [num_tokens x semantic_dim]
};

// Frozen stand-in for the MoGe encoder: patch embedding of the geometry
// channel only, followed by N residual mixing blocks
//   x <- x + tanh(T_i x W_i + b_i)
// with T_i mixing tokens and W_i mixing features. All block outputs are
// returned so that callers choose which ones to tap.
class GeometryEncoder {
public:
    explicit GeometryEncoder(const EncoderConfig& cfg);

    BlockFeatures encode(const ImageGrid& img) const;
    const EncoderConfig& config() const { return cfg_; }
    std::uint64_t checksum() const;

private:
    EncoderConfig cfg_;
    Tensor projection_;  // [patch * patch x geometry_dim]
    Tensor position_;
    std::vector<Tensor> token_mix_;
    std::vector<Tensor> channel_mix_;
    std::vector<Tensor> bias_;
};

// Row-major patch vectors over the given channels: [num_tokens x patch*patch*channels.size()].
Tensor patchify(const ImageGrid& img, std::size_t patch, std::span<const std::size_t> channels);

}  // namespace spatialgeo
