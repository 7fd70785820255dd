#pragma once

#include "m2d/archive.hpp"
#include "m2d/tensor.hpp"

#include <cstdint>
#include <string>

namespace m2d {

/// Linear warm-up from 0 to `peak` over `warmup_steps`, then half-cosine
/// decay to `floor` at `total_steps`.
double warmup_cosine_lr(double peak, double floor, std::int64_t step, std::int64_t warmup_steps,
                        std::int64_t total_steps);

/// Parameters with a single row (biases, norm affines, mask token) are
/// exempt from weight decay.
bool decays(const Matrix& param);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// Lazily allocates moments for exactly the keys of `grads`; every key
  /// must exist in `params`.
  void step(ParamMap& params, const ParamMap& grads, double lr);

  const ParamMap& first_moment() const { return m_; }
  const ParamMap& second_moment() const { return v_; }
  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return config_; }

  void save(Archive& archive, const std::string& prefix = "optim.") const;
  void load(const Archive& archive, const std::string& prefix = "optim.");

 private:
  AdamWConfig config_;
  ParamMap m_;
  ParamMap v_;
  std::int64_t t_ = 0;
};

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 0.0;
};

class Sgd {
 public:
  explicit Sgd(SgdConfig config = {}) : config_(config) {}
  void step(ParamMap& params, const ParamMap& grads, double lr);

 private:
  SgdConfig config_;
  ParamMap buffer_;
};

}  // namespace m2d
