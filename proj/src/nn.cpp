#include "m2d/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace m2d::nn {

Matrix linear_forward(const Matrix& x, const Matrix& weight, const Matrix& bias) {
  Matrix y = x * weight;
  y.rowwise() += bias.row(0);
  return y;
}

Matrix linear_backward(const Matrix& x, const Matrix& weight, const Matrix& dy, Matrix& dweight,
                       Matrix& dbias) {
  dweight.noalias() += x.transpose() * dy;
  dbias += dy.colwise().sum();
  return dy * weight.transpose();
}

Matrix layer_norm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                          LayerNormCache* cache) {
  const Eigen::Index n = x.rows();
  const double width = static_cast<double>(x.cols());
  Matrix normalized(n, x.cols());
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / width;
    const auto centered = x.row(i).array() - mean;
    const double var = centered.square().sum() / width;
    inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    normalized.row(i) = centered * inv_std(i);
  }
  Matrix y = normalized.array().rowwise() * gamma.row(0).array();
  y.rowwise() += beta.row(0);
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gamma, const Matrix& dy,
                           Matrix& dgamma, Matrix& dbeta) {
  dgamma += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  dbeta += dy.colwise().sum();
  const Matrix dnorm = dy.array().rowwise() * gamma.row(0).array();
  const double width = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_d = dnorm.row(i).sum() / width;
    const double mean_dn = dnorm.row(i).dot(cache.normalized.row(i)) / width;
    dx.row(i) = cache.inv_std(i) *
                (dnorm.row(i).array() - mean_d - cache.normalized.row(i).array() * mean_dn);
  }
  return dx;
}

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); });
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Matrix dx(x.rows(), x.cols());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double v = x.data()[k];
    const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    dx.data()[k] = dy.data()[k] * (cdf + v * pdf);
  }
  return dx;
}

Matrix softmax_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double shift = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - shift).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

Matrix xavier_uniform(int fan_in, int fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w(fan_in, fan_out);
  for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = dist(rng);
  return w;
}

TransformerStack::TransformerStack(std::string prefix, StackConfig config)
    : prefix_(std::move(prefix)), config_(config) {
  if (config_.depth < 0) throw std::invalid_argument("stack depth must be >= 0");
  if (config_.depth > 0) {
    if (config_.heads < 1 || config_.width % config_.heads != 0) {
      throw std::invalid_argument("stack width must be divisible by the head count");
    }
    if (config_.hidden() < 1) throw std::invalid_argument("mlp_ratio gives an empty hidden layer");
  }
}

std::string TransformerStack::name(int block, const char* leaf) const {
  return prefix_ + "blocks." + std::to_string(block) + "." + leaf;
}

void TransformerStack::init(ParamMap& params, std::mt19937_64& rng) const {
  const int w = config_.width;
  const int h = config_.hidden();
  for (int b = 0; b < config_.depth; ++b) {
    params[name(b, "norm1.weight")] = Matrix::Ones(1, w);
    params[name(b, "norm1.bias")] = Matrix::Zero(1, w);
    params[name(b, "attn.qkv.weight")] = xavier_uniform(w, 3 * w, rng);
    params[name(b, "attn.qkv.bias")] = Matrix::Zero(1, 3 * w);
    params[name(b, "attn.proj.weight")] = xavier_uniform(w, w, rng);
    params[name(b, "attn.proj.bias")] = Matrix::Zero(1, w);
    params[name(b, "norm2.weight")] = Matrix::Ones(1, w);
    params[name(b, "norm2.bias")] = Matrix::Zero(1, w);
    params[name(b, "mlp.fc1.weight")] = xavier_uniform(w, h, rng);
    params[name(b, "mlp.fc1.bias")] = Matrix::Zero(1, h);
    params[name(b, "mlp.fc2.weight")] = xavier_uniform(h, w, rng);
    params[name(b, "mlp.fc2.bias")] = Matrix::Zero(1, w);
  }
}

Matrix TransformerStack::forward(const ParamMap& params, Matrix x, Cache* cache) const {
  const int width = config_.width;
  const int heads = config_.heads;
  const int head_dim = heads > 0 ? width / heads : 0;
  const double scale = head_dim > 0 ? 1.0 / std::sqrt(static_cast<double>(head_dim)) : 0.0;
  if (config_.depth > 0 && x.cols() != width) {
    throw std::invalid_argument("stack input width does not match the configured width");
  }
  if (cache) cache->blocks.assign(config_.depth, {});

  for (int b = 0; b < config_.depth; ++b) {
    BlockCache local;
    BlockCache& bc = cache ? cache->blocks[b] : local;
    const Eigen::Index n = x.rows();

    bc.norm1_out = layer_norm_forward(x, params.at(name(b, "norm1.weight")),
                                      params.at(name(b, "norm1.bias")), &bc.norm1);
    bc.qkv = linear_forward(bc.norm1_out, params.at(name(b, "attn.qkv.weight")),
                            params.at(name(b, "attn.qkv.bias")));
    bc.context.resize(n, width);
    bc.probs.resize(heads);
    for (int h = 0; h < heads; ++h) {
      const auto q = bc.qkv.middleCols(h * head_dim, head_dim);
      const auto k = bc.qkv.middleCols(width + h * head_dim, head_dim);
      const auto v = bc.qkv.middleCols(2 * width + h * head_dim, head_dim);
      bc.probs[h] = softmax_rows((q * k.transpose()) * scale);
      bc.context.middleCols(h * head_dim, head_dim).noalias() = bc.probs[h] * v;
    }
    Matrix attn = linear_forward(bc.context, params.at(name(b, "attn.proj.weight")),
                                 params.at(name(b, "attn.proj.bias")));
    bc.input = std::move(x);
    bc.after_attn = bc.input + attn;

    bc.norm2_out = layer_norm_forward(bc.after_attn, params.at(name(b, "norm2.weight")),
                                      params.at(name(b, "norm2.bias")), &bc.norm2);
    bc.fc1_out = linear_forward(bc.norm2_out, params.at(name(b, "mlp.fc1.weight")),
                                params.at(name(b, "mlp.fc1.bias")));
    bc.act_out = gelu(bc.fc1_out);
    x = bc.after_attn + linear_forward(bc.act_out, params.at(name(b, "mlp.fc2.weight")),
                                       params.at(name(b, "mlp.fc2.bias")));
  }
  return x;
}

Matrix TransformerStack::backward(const ParamMap& params, const Cache& cache, Matrix dy,
                                  ParamMap& grads) const {
  const int width = config_.width;
  const int heads = config_.heads;
  const int head_dim = heads > 0 ? width / heads : 0;
  const double scale = head_dim > 0 ? 1.0 / std::sqrt(static_cast<double>(head_dim)) : 0.0;
  if (static_cast<int>(cache.blocks.size()) != config_.depth) {
    throw std::logic_error("stack backward called without a matching forward cache");
  }

  for (int b = config_.depth - 1; b >= 0; --b) {
    const BlockCache& bc = cache.blocks[b];
    const Eigen::Index n = bc.input.rows();

    // MLP branch.
    Matrix d_act = linear_backward(bc.act_out, params.at(name(b, "mlp.fc2.weight")), dy,
                                   grads.at(name(b, "mlp.fc2.weight")),
                                   grads.at(name(b, "mlp.fc2.bias")));
    Matrix d_fc1 = gelu_backward(bc.fc1_out, d_act);
    Matrix d_norm2 = linear_backward(bc.norm2_out, params.at(name(b, "mlp.fc1.weight")), d_fc1,
                                     grads.at(name(b, "mlp.fc1.weight")),
                                     grads.at(name(b, "mlp.fc1.bias")));
    Matrix d_after_attn = dy + layer_norm_backward(bc.norm2, params.at(name(b, "norm2.weight")),
                                                   d_norm2, grads.at(name(b, "norm2.weight")),
                                                   grads.at(name(b, "norm2.bias")));

    // Attention branch.
    Matrix d_context = linear_backward(bc.context, params.at(name(b, "attn.proj.weight")),
                                       d_after_attn, grads.at(name(b, "attn.proj.weight")),
                                       grads.at(name(b, "attn.proj.bias")));
    Matrix d_qkv(n, 3 * width);
    for (int h = 0; h < heads; ++h) {
      const auto q = bc.qkv.middleCols(h * head_dim, head_dim);
      const auto k = bc.qkv.middleCols(width + h * head_dim, head_dim);
      const auto v = bc.qkv.middleCols(2 * width + h * head_dim, head_dim);
      const auto d_out = d_context.middleCols(h * head_dim, head_dim);
      const Matrix& p = bc.probs[h];
      const Matrix d_p = d_out * v.transpose();
      d_qkv.middleCols(2 * width + h * head_dim, head_dim).noalias() = p.transpose() * d_out;
      Matrix d_scores = p.array() * (d_p.array().colwise() -
                                     (d_p.array() * p.array()).rowwise().sum());
      d_scores *= scale;
      d_qkv.middleCols(h * head_dim, head_dim).noalias() = d_scores * k;
      d_qkv.middleCols(width + h * head_dim, head_dim).noalias() = d_scores.transpose() * q;
    }
    Matrix d_norm1 = linear_backward(bc.norm1_out, params.at(name(b, "attn.qkv.weight")), d_qkv,
                                     grads.at(name(b, "attn.qkv.weight")),
                                     grads.at(name(b, "attn.qkv.bias")));
    dy = d_after_attn + layer_norm_backward(bc.norm1, params.at(name(b, "norm1.weight")), d_norm1,
                                            grads.at(name(b, "norm1.weight")),
                                            grads.at(name(b, "norm1.bias")));
  }
  return dy;
}

}  // namespace m2d::nn
