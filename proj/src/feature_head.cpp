#include "m2d/feature_head.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace m2d {

namespace {

void check_tokens(const Matrix& z, const ShapeSpec& shape) {
  if (z.rows() != shape.num_patches()) {
    throw std::invalid_argument("expected " + std::to_string(shape.num_patches()) +
                                " tokens (" + std::to_string(shape.n_freq) + "x" +
                                std::to_string(shape.n_time) + "), got " + std::to_string(z.rows()));
  }
}

}  // namespace

Matrix frame_features(const Matrix& z, const ShapeSpec& shape) {
  check_tokens(z, shape);
  const Eigen::Index D = z.cols();
  Matrix out(shape.n_time, shape.n_freq * D);
  for (int t = 0; t < shape.n_time; ++t) {
    for (int f = 0; f < shape.n_freq; ++f) out.row(t).segment(f * D, D) = z.row(f * shape.n_time + t);
  }
  return out;
}

Matrix tokens_from_frames(const Matrix& frames, const ShapeSpec& shape) {
  if (frames.rows() != shape.n_time || frames.cols() % shape.n_freq != 0) {
    throw std::invalid_argument("frame features do not match the token grid");
  }
  const Eigen::Index D = frames.cols() / shape.n_freq;
  Matrix z(shape.num_patches(), D);
  for (int t = 0; t < shape.n_time; ++t) {
    for (int f = 0; f < shape.n_freq; ++f) z.row(f * shape.n_time + t) = frames.row(t).segment(f * D, D);
  }
  return z;
}

RowVector clip_feature(const Matrix& frames) {
  if (frames.rows() < 1) throw std::invalid_argument("clip_feature: no frames");
  return frames.colwise().mean();
}

RowVector long_clip_feature(std::span<const Matrix> segments) {
  if (segments.empty()) throw std::invalid_argument("long_clip_feature: no segments");
  RowVector sum = RowVector::Zero(segments.front().cols());
  Eigen::Index rows = 0;
  for (const auto& s : segments) {
    if (s.cols() != sum.cols()) throw std::invalid_argument("long_clip_feature: width mismatch");
    sum += s.colwise().sum();
    rows += s.rows();
  }
  if (rows == 0) throw std::invalid_argument("long_clip_feature: no frames");
  return sum / static_cast<double>(rows);
}

RowVector masked_mean_feature(const Matrix& z, std::span<const int> kept) {
  if (kept.empty()) throw std::invalid_argument("masked_mean_feature: no kept tokens");
  RowVector sum = RowVector::Zero(z.cols());
  for (int i : kept) {
    if (i < 0 || i >= z.rows()) throw std::out_of_range("masked_mean_feature: token index out of range");
    sum += z.row(i);
  }
  return sum / static_cast<double>(kept.size());
}

Matrix clip_feature_backward(const RowVector& d_clip, const ShapeSpec& shape) {
  if (d_clip.cols() % shape.n_freq != 0) throw std::invalid_argument("gradient width mismatch");
  const Matrix d_frames = d_clip.replicate(shape.n_time, 1) / static_cast<double>(shape.n_time);
  return tokens_from_frames(d_frames, shape);
}

Matrix masked_mean_backward(const RowVector& d_feature, int num_tokens, std::span<const int> kept) {
  Matrix dz = Matrix::Zero(num_tokens, d_feature.cols());
  for (int i : kept) dz.row(i) += d_feature / static_cast<double>(kept.size());
  return dz;
}

RowVector encode_clip_feature(const Encoder& encoder, const ParamMap& params,
                              const Matrix& positions, const PatchSequence& clip) {
  return clip_feature(frame_features(encode(encoder, params, clip.tokens, positions), clip.shape));
}

void write_feature_dump(const std::filesystem::path& path, const Matrix& features,
                        const std::vector<std::vector<std::string>>& labels) {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw std::invalid_argument("feature dump: one label set per row required");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("feature dump " + path.string() + ": cannot open for writing");
  out << "labels";
  for (Eigen::Index j = 0; j < features.cols(); ++j) out << ",f" << j;
  out << '\n' << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    for (std::size_t k = 0; k < labels[i].size(); ++k) out << (k ? ";" : "") << labels[i][k];
    for (Eigen::Index j = 0; j < features.cols(); ++j) out << ',' << features(i, j);
    out << '\n';
  }
}

FeatureDump read_feature_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("feature dump " + path.string() + ": cannot open");
  std::string line;
  std::getline(in, line);
  const auto cols = std::count(line.begin(), line.end(), ',');
  std::vector<std::vector<double>> rows;
  FeatureDump dump;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string cell;
    std::getline(fields, cell, ',');
    std::vector<std::string> labels;
    std::istringstream split(cell);
    for (std::string l; std::getline(split, l, ';');) labels.push_back(l);
    dump.labels.push_back(labels);
    std::vector<double> row;
    while (std::getline(fields, cell, ',')) row.push_back(std::stod(cell));
    if (static_cast<long>(row.size()) != cols) throw std::runtime_error("feature dump " + path.string() + ": ragged row");
    rows.push_back(std::move(row));
  }
  dump.features.resize(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (long j = 0; j < cols; ++j) dump.features(i, j) = rows[i][j];
  }
  return dump;
}

}  // namespace m2d
