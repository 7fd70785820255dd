#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <string>

namespace m2d {

/// Dense row-major matrix. Token sequences are stored one token per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Named parameter (or gradient, or optimizer moment) set. Ordered by name so
/// iteration, serialization and RNG-driven initialization are deterministic.
using ParamMap = std::map<std::string, Matrix>;

/// Returns a map with the same keys and shapes as `like`, all zeros.
ParamMap zeros_like(const ParamMap& like);

/// True when both maps have identical key sets and per-key shapes.
bool congruent(const ParamMap& a, const ParamMap& b);

/// a += scale * b, key by key. Throws std::invalid_argument on incongruent maps.
void accumulate(ParamMap& a, const ParamMap& b, double scale = 1.0);

/// Returns the sub-map whose keys start with `prefix`.
ParamMap with_prefix(const ParamMap& params, const std::string& prefix);

/// Total number of scalars.
std::int64_t parameter_count(const ParamMap& params);

bool all_finite(const ParamMap& params);

}  // namespace m2d
