#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "spatialgeo/params.hpp"

namespace spatialgeo {

// Binary checkpoint layout, version 1. All integers and values little-endian.
//
//   magic      8 bytes   "SGCKPT\0\0"
//   version    u32
//   meta_len   u64, then meta_len bytes of UTF-8 metadata (JSON by convention)
//   count      u64
//   count x entry, sorted by name:
//     name_len u32, name bytes
//     flags    u8        bit 0 = frozen
//     ndim     u32, ndim x u64 dims
//     numel x f64 values (IEEE-754 binary64)
//   trailer    u64 FNV-1a of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    Shape shape;
    std::vector<double> values;
    bool frozen = false;
};

struct CheckpointData {
    std::string meta;
    std::map<std::string, TensorRecord> tensors;

    void put(const std::string& name, const Tensor& t, bool frozen = false);
    void put(const std::string& name, Shape shape, std::vector<double> values, bool frozen = false);
    void put_params(const ParamSet& params);
    const TensorRecord& at(const std::string& name) const;
};

std::string encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

// Rebuilds a ParamSet from every record whose name starts with prefix.
ParamSet params_from_checkpoint(const CheckpointData& data, std::string_view prefix = "");

}  // namespace spatialgeo
