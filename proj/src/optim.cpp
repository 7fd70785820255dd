#include "m2d/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace m2d {

double warmup_cosine_lr(double peak, double floor, std::int64_t step, std::int64_t warmup_steps,
                        std::int64_t total_steps) {
  if (step < warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return peak;
  const double progress = std::min(
      1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps));
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool decays(const Matrix& param) { return param.rows() > 1; }

void AdamW::step(ParamMap& params, const ParamMap& grads, double lr) {
  if (m_.empty()) {
    m_ = zeros_like(grads);
    v_ = zeros_like(grads);
  } else if (!congruent(m_, grads)) {
    throw std::invalid_argument("AdamW: gradient keys changed between steps");
  }
  ++t_;
  const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("AdamW: no parameter named " + name);
    Matrix& p = it->second;
    Matrix& m = m_.at(name);
    Matrix& v = v_.at(name);
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    if (decays(p)) p *= (1.0 - lr * config_.weight_decay);
    p.array() -= lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + config_.eps);
  }
}

void AdamW::save(Archive& archive, const std::string& prefix) const {
  for (const auto& [name, value] : m_) archive.tensors[prefix + "m." + name] = value;
  for (const auto& [name, value] : v_) archive.tensors[prefix + "v." + name] = value;
  archive.meta["optimizer"] = {{"kind", "adamw"},
                               {"steps", t_},
                               {"beta1", config_.beta1},
                               {"beta2", config_.beta2},
                               {"eps", config_.eps},
                               {"weight_decay", config_.weight_decay}};
}

void AdamW::load(const Archive& archive, const std::string& prefix) {
  m_.clear();
  v_.clear();
  const std::string mp = prefix + "m.";
  const std::string vp = prefix + "v.";
  for (const auto& [name, value] : archive.tensors) {
    if (name.rfind(mp, 0) == 0) m_[name.substr(mp.size())] = value;
    if (name.rfind(vp, 0) == 0) v_[name.substr(vp.size())] = value;
  }
  const auto& meta = archive.meta.at("optimizer");
  t_ = meta.at("steps").get<std::int64_t>();
  config_.beta1 = meta.at("beta1");
  config_.beta2 = meta.at("beta2");
  config_.eps = meta.at("eps");
  config_.weight_decay = meta.at("weight_decay");
}

void Sgd::step(ParamMap& params, const ParamMap& grads, double lr) {
  if (buffer_.empty()) buffer_ = zeros_like(grads);
  for (const auto& [name, g] : grads) {
    Matrix& p = params.at(name);
    Matrix& buf = buffer_.at(name);
    Matrix d = g;
    if (config_.weight_decay > 0.0 && decays(p)) d += config_.weight_decay * p;
    buf = config_.momentum * buf + d;
    p -= lr * buf;
  }
}

}  // namespace m2d
