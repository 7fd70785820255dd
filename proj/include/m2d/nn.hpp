#pragma once

// Transformer building blocks with explicit forward/backward passes.
//
// Parameters live in a ParamMap keyed by timm-style names
// ("<prefix>blocks.0.attn.qkv.weight", ...). Linear weights are stored
// (in_features x out_features) so that y = x * W + b for row-token inputs;
// biases and LayerNorm affine parameters are 1 x n.
//
// Forward passes take an optional cache pointer. Passing nullptr runs the
// layer for inference only; backward requires the cache of the matching
// forward call and accumulates (+=) into a gradient map.

#include "m2d/tensor.hpp"

#include <random>
#include <string>
#include <vector>

namespace m2d::nn {

inline constexpr double kLayerNormEps = 1e-6;

Matrix linear_forward(const Matrix& x, const Matrix& weight, const Matrix& bias);
/// Returns dx and accumulates dW, db.
Matrix linear_backward(const Matrix& x, const Matrix& weight, const Matrix& dy, Matrix& dweight,
                       Matrix& dbias);

struct LayerNormCache {
  Matrix normalized;          // (x - mean) * rstd
  Eigen::VectorXd inv_std;    // per row
};

Matrix layer_norm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                          LayerNormCache* cache);
Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gamma, const Matrix& dy,
                           Matrix& dgamma, Matrix& dbeta);

/// Exact (erf) GELU.
Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

/// Row-wise softmax, numerically shifted.
Matrix softmax_rows(const Matrix& x);

/// Xavier-uniform initializer used for every linear weight.
Matrix xavier_uniform(int fan_in, int fan_out, std::mt19937_64& rng);

struct StackConfig {
  int depth = 2;
  int heads = 4;
  int width = 96;
  double mlp_ratio = 4.0;

  int hidden() const { return static_cast<int>(width * mlp_ratio); }
};

/// Pre-norm transformer blocks: x + Attn(LN(x)), then x + MLP(LN(x)).
class TransformerStack {
 public:
  struct BlockCache {
    Matrix input;
    LayerNormCache norm1;
    Matrix norm1_out;
    Matrix qkv;
    std::vector<Matrix> probs;  // per head, n x n
    Matrix context;             // n x width, heads concatenated
    Matrix after_attn;
    LayerNormCache norm2;
    Matrix norm2_out;
    Matrix fc1_out;             // pre-activation
    Matrix act_out;
  };
  struct Cache {
    std::vector<BlockCache> blocks;
  };

  TransformerStack(std::string prefix, StackConfig config);

  void init(ParamMap& params, std::mt19937_64& rng) const;
  Matrix forward(const ParamMap& params, Matrix x, Cache* cache) const;
  /// Returns dL/dx of the stack input.
  Matrix backward(const ParamMap& params, const Cache& cache, Matrix dy, ParamMap& grads) const;

  const StackConfig& config() const { return config_; }

 private:
  std::string name(int block, const char* leaf) const;

  std::string prefix_;
  StackConfig config_;
};

}  // namespace m2d::nn
