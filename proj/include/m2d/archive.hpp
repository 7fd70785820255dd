#pragma once

// Tensor archive used for checkpoints and cached spectrograms.
//
// Layout (all integers little-endian):
//   bytes [0, 8)   magic "M2DARCH1"
//   bytes [8, 16)  uint64 header length H
//   bytes [16, 16+H)  UTF-8 JSON header:
//       {"format_version": 1,
//        "meta": {...free-form provenance...},
//        "tensors": [{"name": s, "dtype": "f64", "shape": [rows, cols],
//                     "offset": o, "nbytes": b}, ...]}
//   bytes [16+H, ...) payload; tensor data is row-major IEEE-754 binary64,
//       `offset` counted from the start of the payload.

#include "m2d/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace m2d {

inline constexpr char kArchiveMagic[8] = {'M', '2', 'D', 'A', 'R', 'C', 'H', '1'};
inline constexpr int kArchiveFormatVersion = 1;

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  ParamMap tensors;
};

/// Throws std::runtime_error naming the path on I/O failure.
void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

}  // namespace m2d
