#include "spatialgeo/encoders.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "spatialgeo/errors.hpp"
#include "spatialgeo/params.hpp"

namespace spatialgeo {

ImageGrid::ImageGrid(std::size_t height, std::size_t width, double fill)
    : ImageGrid(height, width, std::vector<double>(height * width * kChannels, fill)) {}

ImageGrid::ImageGrid(std::size_t height, std::size_t width, std::vector<double> values)
    : height_(height), width_(width), values_(std::move(values)) {
    if (values_.size() != height_ * width_ * kChannels) {
        throw DimensionError("ImageGrid: expected " + std::to_string(height_ * width_ * kChannels) + " values, got " +
                             std::to_string(values_.size()));
    }
    for (double v : values_) {
        if (!(v >= 0.0 && v <= 1.0)) throw DataError("ImageGrid: pixel value outside [0, 1]");
    }
}

void ImageGrid::set(std::size_t y, std::size_t x, std::size_t c, double v) {
    if (y >= height_ || x >= width_ || c >= kChannels) throw IndexError("ImageGrid::set: out of range");
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("ImageGrid::set: pixel value outside [0, 1]");
    values_[(y * width_ + x) * kChannels + c] = v;
}

ImageGrid resize_to_square(const ImageGrid& img, std::size_t side) {
    if (side == 0) throw ContractError("resize_to_square: side must be positive");
    if (img.empty()) throw DataError("resize_to_square: empty image");
    if (img.height() == side && img.width() == side) return img;

    const auto h = img.height(), w = img.width();
    std::vector<double> out(side * side * ImageGrid::kChannels);
    auto source = [](std::size_t dst, std::size_t in, std::size_t outn) {
        double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(s));
        const auto i1 = std::min(i0 + 1, in - 1);
        return std::tuple{i0, i1, s - static_cast<double>(i0)};
    };
    for (std::size_t y = 0; y < side; ++y) {
        const auto [y0, y1, fy] = source(y, h, side);
        for (std::size_t x = 0; x < side; ++x) {
            const auto [x0, x1, fx] = source(x, w, side);
            for (std::size_t c = 0; c < ImageGrid::kChannels; ++c) {
                const double top = img.at(y0, x0, c) * (1.0 - fx) + img.at(y0, x1, c) * fx;
                const double bot = img.at(y1, x0, c) * (1.0 - fx) + img.at(y1, x1, c) * fx;
                out[(y * side + x) * ImageGrid::kChannels + c] = std::clamp(top * (1.0 - fy) + bot * fy, 0.0, 1.0);
            }
        }
    }
    return ImageGrid(side, side, std::move(out));
}

namespace {

std::string next_token(std::istream& is) {
    std::string tok;
    while (is >> tok) {
        if (tok[0] != '#') return tok;
        std::string rest;
        std::getline(is, rest);
    }
    throw DataError("PPM: unexpected end of header");
}

}  // namespace

ImageGrid read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image '" + path.string() + "'");
    const std::string magic = next_token(is);
    if (magic != "P6" && magic != "P3") throw DataError("PPM: unsupported magic '" + magic + "'");
    const std::size_t w = std::stoul(next_token(is));
    const std::size_t h = std::stoul(next_token(is));
    const double maxval = std::stod(next_token(is));
    if (w == 0 || h == 0 || maxval <= 0 || maxval > 255) throw DataError("PPM: bad header in '" + path.string() + "'");
    std::vector<double> values(w * h * 3);
    if (magic == "P6") {
        is.get();  // single whitespace after maxval
        std::vector<unsigned char> raw(values.size());
        is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (is.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError("PPM: truncated pixel data");
        for (std::size_t i = 0; i < raw.size(); ++i) values[i] = raw[i] / maxval;
    } else {
        for (auto& v : values) v = std::min(1.0, std::stod(next_token(is)) / maxval);
    }
    return ImageGrid(h, w, std::move(values));
}

void write_ppm(const std::filesystem::path& path, const ImageGrid& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
    for (double v : img.values()) os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

void EncoderConfig::validate() const {
    if (patch_size == 0 || image_side == 0) throw ConfigError("encoder: patch_size and image_side must be positive");
    if (image_side % patch_size != 0) throw ConfigError("encoder: image_side must be divisible by patch_size");
    if (semantic_dim == 0 || geometry_dim == 0) throw ConfigError("encoder: feature dims must be positive");
    if (blocks < 4) throw ConfigError("encoder: geometry encoder needs at least 4 blocks");
}

Tensor patchify(const ImageGrid& img, std::size_t patch, std::span<const std::size_t> channels) {
    const std::size_t g = img.height() / patch;
    const std::size_t width = patch * patch * channels.size();
    std::vector<double> out(g * g * width);
    for (std::size_t py = 0; py < g; ++py) {
        for (std::size_t px = 0; px < g; ++px) {
            double* row = out.data() + (py * g + px) * width;
            std::size_t k = 0;
            for (std::size_t y = 0; y < patch; ++y) {
                for (std::size_t x = 0; x < patch; ++x) {
                    for (auto c : channels) row[k++] = img.at(py * patch + y, px * patch + x, c);
                }
            }
        }
    }
    return Tensor::from({g * g, width}, std::move(out));
}

namespace {

constexpr std::array<std::size_t, 2> kAppearanceChannels{0, 1};
constexpr std::array<std::size_t, 1> kGeometryChannels{ImageGrid::kGeometryChannel};

void require_input_size(const ImageGrid& img, const EncoderConfig& cfg, const char* who) {
    if (img.height() != cfg.image_side || img.width() != cfg.image_side) {
        throw ContractError(std::string(who) + ": image must be " + std::to_string(cfg.image_side) + "x" +
                            std::to_string(cfg.image_side) + ", got " + std::to_string(img.height()) + "x" +
                            std::to_string(img.width()));
    }
}

}  // namespace

SemanticEncoder::SemanticEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, 0x5e3a));
    const std::size_t in = cfg_.patch_size * cfg_.patch_size * kAppearanceChannels.size();
    projection_ = Tensor::randn({in, cfg_.semantic_dim}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    position_ = Tensor::randn({cfg_.num_tokens(), cfg_.semantic_dim}, rng, 0.1);
}

Tensor SemanticEncoder::encode(const ImageGrid& img) const {
    require_input_size(img, cfg_, "semantic_encode");
    NoGradGuard guard;
    return add(matmul(patchify(img, cfg_.patch_size, kAppearanceChannels), projection_), position_);
}

std::uint64_t SemanticEncoder::checksum() const {
    return mix_seed(spatialgeo::checksum(projection_.data()) ^ mix_seed(spatialgeo::checksum(position_.data())));
}

GeometryEncoder::GeometryEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, 0x6e0));
    const std::size_t in = cfg_.patch_size * cfg_.patch_size * kGeometryChannels.size();
    const std::size_t n = cfg_.num_tokens(), d = cfg_.geometry_dim;
    projection_ = Tensor::randn({in, d}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    position_ = Tensor::randn({n, d}, rng, 0.1);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
        token_mix_.push_back(Tensor::randn({n, n}, rng, 1.0 / std::sqrt(static_cast<double>(n))));
        channel_mix_.push_back(Tensor::randn({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
        bias_.push_back(Tensor::randn({d}, rng, 0.1));
    }
}

BlockFeatures GeometryEncoder::encode(const ImageGrid& img) const {
    require_input_size(img, cfg_, "geometry_encode");
    NoGradGuard guard;
    Tensor x = add(matmul(patchify(img, cfg_.patch_size, kGeometryChannels), projection_), position_);
    BlockFeatures out;
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
        x = add(x, tanh(add_bias(matmul(matmul(token_mix_[b], x), channel_mix_[b]), bias_[b])));
        out.blocks.push_back(x);
    }
    return out;
}

std::uint64_t GeometryEncoder::checksum() const {
    std::uint64_t h = mix_seed(spatialgeo::checksum(projection_.data()) ^ spatialgeo::checksum(position_.data()));
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
        h = mix_seed(h ^ spatialgeo::checksum(token_mix_[b].data()));
        h = mix_seed(h ^ spatialgeo::checksum(channel_mix_[b].data()));
        h = mix_seed(h ^ spatialgeo::checksum(bias_[b].data()));
    }
    return h;
}

}  // namespace spatialgeo
