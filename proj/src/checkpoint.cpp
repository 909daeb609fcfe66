#include "spatialgeo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "spatialgeo/errors.hpp"

namespace spatialgeo {

namespace {

constexpr char kMagic[8] = {'S', 'G', 'C', 'K', 'P', 'T', '\0', '\0'};

template <typename T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : b_(bytes) {}

    template <typename T>
    T le() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<T>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw LoadError("checkpoint truncated");
    }

    const std::string& b_;
    std::size_t pos_ = 0;
};

std::uint64_t fnv1a(const char* p, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(p[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

void CheckpointData::put(const std::string& name, const Tensor& t, bool frozen) {
    put(name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()), frozen);
}

void CheckpointData::put(const std::string& name, Shape shape, std::vector<double> values, bool frozen) {
    if (shape_numel(shape) != values.size()) throw DimensionError("checkpoint entry '" + name + "' size mismatch");
    tensors[name] = TensorRecord{std::move(shape), std::move(values), frozen};
}

void CheckpointData::put_params(const ParamSet& params) {
    for (const auto& [n, t] : params.items()) put(n, t, params.is_frozen(n));
}

const TensorRecord& CheckpointData::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw LoadError("checkpoint has no entry '" + name + "'");
    return it->second;
}

std::string encode_checkpoint(const CheckpointData& data) {
    std::string out(kMagic, sizeof(kMagic));
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, data.meta.size());
    out += data.meta;
    put_le<std::uint64_t>(out, data.tensors.size());
    for (const auto& [name, rec] : data.tensors) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(rec.frozen ? 1 : 0));
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.shape.size()));
        for (auto d : rec.shape) put_le<std::uint64_t>(out, d);
        for (double v : rec.values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    put_le<std::uint64_t>(out, fnv1a(out.data(), out.size()));
    return out;
}

CheckpointData decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw LoadError("not a checkpoint file (bad magic)");
    }
    Reader r(bytes);
    r.bytes(sizeof(kMagic));
    const auto version = r.le<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw LoadError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    {
        Reader tail(bytes);
        const std::size_t body = bytes.size() - 8;
        tail.bytes(body);
        if (tail.le<std::uint64_t>() != fnv1a(bytes.data(), body)) throw LoadError("checkpoint checksum mismatch");
    }
    CheckpointData data;
    data.meta = r.bytes(r.le<std::uint64_t>());
    const auto count = r.le<std::uint64_t>();
    for (std::uint64_t k = 0; k < count; ++k) {
        std::string name = r.bytes(r.le<std::uint32_t>());
        const bool frozen = r.bytes(1)[0] != 0;
        const auto ndim = r.le<std::uint32_t>();
        Shape shape(ndim);
        for (auto& d : shape) d = r.le<std::uint64_t>();
        const auto n = shape_numel(shape);
        if (n > (bytes.size() - r.pos()) / 8) throw LoadError("checkpoint entry '" + name + "' truncated");
        std::vector<double> values(n);
        for (auto& v : values) v = std::bit_cast<double>(r.le<std::uint64_t>());
        data.tensors.emplace(std::move(name), TensorRecord{std::move(shape), std::move(values), frozen});
    }
    if (r.pos() != bytes.size() - 8) throw LoadError("checkpoint has trailing bytes");
    return data;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    const auto bytes = encode_checkpoint(data);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return decode_checkpoint(ss.str());
}

ParamSet params_from_checkpoint(const CheckpointData& data, std::string_view prefix) {
    ParamSet out;
    for (const auto& [name, rec] : data.tensors) {
        if (!has_prefix(name, prefix)) continue;
        out.add(name, Tensor::from(rec.shape, rec.values), rec.frozen);
    }
    return out;
}

}  // namespace spatialgeo
