#include "m2d/patch_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace m2d {

InputGrid::InputGrid(int channels_, int height_, int width_, GridKind kind_)
    : channels(channels_), height(height_), width(width_), kind(kind_),
      values(static_cast<std::size_t>(channels_) * height_ * width_, 0.0) {
  if (channels_ < 1 || height_ < 1 || width_ < 1) {
    throw std::invalid_argument("InputGrid: dimensions must be positive");
  }
}

InputGrid InputGrid::from_spectrogram(const Matrix& spec) {
  InputGrid grid(1, static_cast<int>(spec.rows()), static_cast<int>(spec.cols()),
                 GridKind::spectrogram);
  std::copy(spec.data(), spec.data() + spec.size(), grid.values.begin());
  return grid;
}

Matrix InputGrid::to_spectrogram() const {
  if (channels != 1) throw std::invalid_argument("to_spectrogram: grid has more than one channel");
  Matrix spec(height, width);
  std::copy(values.begin(), values.end(), spec.data());
  return spec;
}

ShapeSpec shape_for(int channels, int height, int width, int patch_size) {
  if (patch_size < 1) throw std::invalid_argument("patch_size must be >= 1");
  if (height % patch_size != 0 || width % patch_size != 0 || height < 1 || width < 1) {
    std::ostringstream msg;
    msg << "grid " << height << "x" << width << " is not divisible by patch size " << patch_size
        << " (remainders " << height % patch_size << ", " << width % patch_size << ")";
    throw std::invalid_argument(msg.str());
  }
  return ShapeSpec{patch_size, channels, height / patch_size, width / patch_size};
}

PatchSequence partition(const InputGrid& grid, int patch_size) {
  for (double v : grid.values) {
    if (!std::isfinite(v)) throw std::invalid_argument("partition: grid contains non-finite values");
  }
  const ShapeSpec shape = shape_for(grid.channels, grid.height, grid.width, patch_size);
  PatchSequence seq{Matrix(shape.num_patches(), shape.patch_dim()), shape};
  const int p = patch_size;
  for (int gy = 0; gy < shape.n_freq; ++gy) {
    for (int gx = 0; gx < shape.n_time; ++gx) {
      const int token = gy * shape.n_time + gx;
      int k = 0;
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int c = 0; c < grid.channels; ++c) {
            seq.tokens(token, k++) = grid.at(c, gy * p + py, gx * p + px);
          }
        }
      }
    }
  }
  return seq;
}

InputGrid unpatch(const PatchSequence& seq, GridKind kind) {
  const ShapeSpec& s = seq.shape;
  if (seq.tokens.rows() != s.num_patches() || seq.tokens.cols() != s.patch_dim()) {
    throw std::invalid_argument("unpatch: token matrix does not match its shape spec");
  }
  InputGrid grid(s.channels, s.height(), s.width(), kind);
  const int p = s.patch_size;
  for (int gy = 0; gy < s.n_freq; ++gy) {
    for (int gx = 0; gx < s.n_time; ++gx) {
      const int token = gy * s.n_time + gx;
      int k = 0;
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int c = 0; c < s.channels; ++c) {
            grid.at(c, gy * p + py, gx * p + px) = seq.tokens(token, k++);
          }
        }
      }
    }
  }
  return grid;
}

int visible_count(int num_patches, double ratio) {
  return static_cast<int>(std::floor(num_patches * (1.0 - ratio) + 1e-9));
}

MaskPlan sample_mask(int num_patches, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    std::ostringstream msg;
    msg << "masking ratio " << ratio << " is outside [0, 1]";
    throw std::invalid_argument(msg.str());
  }
  if (num_patches < 1) throw std::invalid_argument("sample_mask: num_patches must be >= 1");

  std::vector<int> order(num_patches);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const int n_visible = visible_count(num_patches, ratio);
  MaskPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  plan.visible.assign(order.begin(), order.begin() + n_visible);
  plan.masked.assign(order.begin() + n_visible, order.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

namespace {

// One axis of the sin-cos table: writes [sin(pos*w_k), cos(pos*w_k)] for
// k < half/2 into `out` starting at column `col0`.
void fill_axis(Matrix& out, int row, int col0, int half, double pos) {
  const int quarter = half / 2;
  for (int k = 0; k < quarter; ++k) {
    const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
    out(row, col0 + k) = std::sin(pos * omega);
    out(row, col0 + quarter + k) = std::cos(pos * omega);
  }
}

}  // namespace

Matrix positional_encoding(const ShapeSpec& shape, int dim) {
  if (dim <= 0 || dim % 4 != 0) {
    std::ostringstream msg;
    msg << "positional encoding width " << dim << " must be a positive multiple of 4";
    throw std::invalid_argument(msg.str());
  }
  if (shape.num_patches() < 1) throw std::invalid_argument("positional_encoding: empty grid");
  Matrix pe(shape.num_patches(), dim);
  const int half = dim / 2;
  for (int f = 0; f < shape.n_freq; ++f) {
    for (int t = 0; t < shape.n_time; ++t) {
      const int row = f * shape.n_time + t;
      fill_axis(pe, row, 0, half, t);
      fill_axis(pe, row, half, half, f);
    }
  }
  return pe;
}

void check_indices(std::span<const int> indices, int limit) {
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= limit) {
      std::ostringstream msg;
      msg << "index " << indices[k] << " out of range [0, " << limit << ")";
      throw std::out_of_range(msg.str());
    }
    if (k > 0 && indices[k] <= indices[k - 1]) {
      throw std::invalid_argument("indices must be sorted and unique");
    }
  }
}

Matrix select(const Matrix& rows, std::span<const int> indices) {
  check_indices(indices, static_cast<int>(rows.rows()));
  Matrix out(static_cast<Eigen::Index>(indices.size()), rows.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) out.row(k) = rows.row(indices[k]);
  return out;
}

}  // namespace m2d
