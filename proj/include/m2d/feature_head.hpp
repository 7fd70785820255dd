#pragma once

// Feature summaries of encoder outputs for evaluation.
//
// z is one clip's N x D encoder output in token order (token i covers
// frequency row i / N_T and time column i % N_T). The frame feature z' is
// N_T x (N_F * D): row t concatenates z[f * N_T + t] for f = 0..N_F-1. The
// clip feature z'' is the mean of z' over time.

#include "m2d/backbone.hpp"
#include "m2d/patch_core.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace m2d {

Matrix frame_features(const Matrix& z, const ShapeSpec& shape);
/// Inverse of frame_features.
Matrix tokens_from_frames(const Matrix& frames, const ShapeSpec& shape);

RowVector clip_feature(const Matrix& frames);
/// Mean over the time-concatenation of all segments' frame features.
RowVector long_clip_feature(std::span<const Matrix> segments);
/// Mean of z over the kept token rows.
RowVector masked_mean_feature(const Matrix& z, std::span<const int> kept);

/// dL/dz given dL/dz'' for clip_feature(frame_features(z, shape)).
Matrix clip_feature_backward(const RowVector& d_clip, const ShapeSpec& shape);
/// dL/dz (N x D) given dL/d feature for masked_mean_feature.
Matrix masked_mean_backward(const RowVector& d_feature, int num_tokens, std::span<const int> kept);

/// z'' of one clip through a frozen encoder (all tokens visible).
RowVector encode_clip_feature(const Encoder& encoder, const ParamMap& params,
                              const Matrix& positions, const PatchSequence& clip);

/// Feature dump: CSV with header `labels,f0,f1,...`; labels of one clip are
/// joined with ';'. One row per clip.
void write_feature_dump(const std::filesystem::path& path, const Matrix& features,
                        const std::vector<std::vector<std::string>>& labels);
struct FeatureDump {
  Matrix features;
  std::vector<std::vector<std::string>> labels;
};
FeatureDump read_feature_dump(const std::filesystem::path& path);

}  // namespace m2d
