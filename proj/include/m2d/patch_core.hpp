#pragma once

// Patch tokenization, positional encoding and mask sampling for 2-D input
// grids (log-mel spectrograms or images).
//
// Token layout is row-major over the patch grid: token i sits at grid cell
// (i / n_time, i % n_time), i.e. frequency-major rows, time-minor columns.
// Inside a token the values are ordered (row in patch, column in patch,
// channel), the same flattening MAE's patchify uses.

#include "m2d/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace m2d {

enum class GridKind { spectrogram, image };

/// Channel-major (C x H x W) input grid.
struct InputGrid {
  int channels = 1;
  int height = 0;
  int width = 0;
  GridKind kind = GridKind::spectrogram;
  std::vector<double> values;

  InputGrid() = default;
  InputGrid(int channels, int height, int width, GridKind kind);

  /// Single-channel spectrogram grid from an (F x T) matrix.
  static InputGrid from_spectrogram(const Matrix& spec);
  /// Inverse of from_spectrogram; requires channels == 1.
  Matrix to_spectrogram() const;

  double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  bool operator==(const InputGrid&) const = default;
};

/// Patch-grid geometry. Encoder width is not part of it; positional
/// encodings take the width separately.
struct ShapeSpec {
  int patch_size = 16;
  int channels = 1;
  int n_freq = 0;  // patches along height / frequency
  int n_time = 0;  // patches along width / time

  int num_patches() const { return n_freq * n_time; }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int height() const { return n_freq * patch_size; }
  int width() const { return n_time * patch_size; }

  bool operator==(const ShapeSpec&) const = default;
};

/// Grid geometry implied by (height, width, patch_size). Throws
/// std::invalid_argument with the offending dimensions if not divisible.
ShapeSpec shape_for(int channels, int height, int width, int patch_size);

struct PatchSequence {
  Matrix tokens;  // num_patches x patch_dim
  ShapeSpec shape;
};

PatchSequence partition(const InputGrid& grid, int patch_size);
InputGrid unpatch(const PatchSequence& seq, GridKind kind = GridKind::spectrogram);

struct MaskPlan {
  double ratio = 0.0;
  std::vector<int> visible;  // sorted
  std::vector<int> masked;   // sorted
  std::uint64_t seed = 0;

  int num_patches() const { return static_cast<int>(visible.size() + masked.size()); }
};

/// Number of visible tokens kept at a given masking ratio: floor(n * (1 - ratio)).
/// A 1e-9 slack absorbs binary rounding of (1 - ratio), e.g. 10 * (1 - 0.9).
int visible_count(int num_patches, double ratio);

/// Uniform-without-replacement split of {0..num_patches-1}. Same seed, same plan.
MaskPlan sample_mask(int num_patches, double ratio, std::uint64_t seed);

/// Fixed 2-D sin-cos table (num_patches x dim). The first dim/2 columns encode
/// the time (column) coordinate and the second dim/2 the frequency (row)
/// coordinate; each half is [sin(pos * w_k) ..., cos(pos * w_k) ...] with
/// w_k = 10000^(-k / (dim/4)). Requires dim % 4 == 0.
Matrix positional_encoding(const ShapeSpec& shape, int dim);

/// Gathers rows `indices` (sorted, unique, in range) of `rows`.
Matrix select(const Matrix& rows, std::span<const int> indices);

/// Checks that `indices` are sorted, unique and inside [0, limit).
void check_indices(std::span<const int> indices, int limit);

}  // namespace m2d
