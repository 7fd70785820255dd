#include "m2d/tensor.hpp"

#include <stdexcept>

namespace m2d {

ParamMap zeros_like(const ParamMap& like) {
  ParamMap out;
  for (const auto& [name, value] : like) {
    out.emplace(name, Matrix::Zero(value.rows(), value.cols()));
  }
  return out;
}

bool congruent(const ParamMap& a, const ParamMap& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (ia->second.rows() != ib->second.rows() || ia->second.cols() != ib->second.cols()) {
      return false;
    }
  }
  return true;
}

void accumulate(ParamMap& a, const ParamMap& b, double scale) {
  if (!congruent(a, b)) throw std::invalid_argument("accumulate: parameter maps are not congruent");
  auto ib = b.begin();
  for (auto& [name, value] : a) {
    value += scale * ib->second;
    ++ib;
  }
}

ParamMap with_prefix(const ParamMap& params, const std::string& prefix) {
  ParamMap out;
  for (auto it = params.lower_bound(prefix); it != params.end(); ++it) {
    if (it->first.compare(0, prefix.size(), prefix) != 0) break;
    out.emplace(it->first, it->second);
  }
  return out;
}

std::int64_t parameter_count(const ParamMap& params) {
  std::int64_t n = 0;
  for (const auto& [name, value] : params) n += value.size();
  return n;
}

bool all_finite(const ParamMap& params) {
  for (const auto& [name, value] : params) {
    if (!value.allFinite()) return false;
  }
  return true;
}

}  // namespace m2d
