#pragma once

// Encoder f (shared architecture of the online and momentum encoders) and
// the predictor g that maps visible-token representations plus mask tokens
// back to a full-length sequence of predictions.

#include "m2d/nn.hpp"
#include "m2d/patch_core.hpp"
#include "m2d/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace m2d {

struct EncoderConfig {
  int depth = 2;
  int heads = 4;
  int width = 96;
  double mlp_ratio = 4.0;

  static EncoderConfig toy() { return {}; }
  static EncoderConfig vit_base() { return {12, 12, 768, 4.0}; }
  void validate() const;
};

struct PredictorConfig {
  int depth = 4;
  int heads = 6;
  int width = 384;
  double mlp_ratio = 4.0;

  static PredictorConfig toy() { return {1, 4, 48, 4.0}; }
  static PredictorConfig msm_mae() { return {}; }
  /// depth 0 makes the predictor the identity map (test stub).
  bool identity() const { return depth == 0; }
  void validate() const;
};

/// Linear patch embedding + fixed positions + pre-norm blocks + final
/// LayerNorm. A depth-0 encoder returns the embedding plus positions
/// unchanged (no final norm).
class Encoder {
 public:
  struct Cache {
    Matrix tokens;
    nn::TransformerStack::Cache stack;
    Matrix stack_out;
    nn::LayerNormCache norm;
  };

  Encoder(EncoderConfig config, int patch_dim, std::string prefix = "encoder.");

  void init(ParamMap& params, std::mt19937_64& rng) const;
  Matrix forward(const ParamMap& params, const Matrix& tokens, const Matrix& positions,
                 Cache* cache) const;
  void backward(const ParamMap& params, const Cache& cache, const Matrix& dy,
                ParamMap& grads) const;

  const EncoderConfig& config() const { return config_; }
  int patch_dim() const { return patch_dim_; }
  const std::string& prefix() const { return prefix_; }

 private:
  EncoderConfig config_;
  int patch_dim_;
  std::string prefix_;
  nn::TransformerStack stack_;
};

/// input_dim -> embed -> blocks -> norm -> head(output_dim).
class Predictor {
 public:
  struct Cache {
    Matrix input;
    Matrix embedded;
    nn::TransformerStack::Cache stack;
    Matrix stack_out;
    nn::LayerNormCache norm;
    Matrix normed;
  };

  Predictor(PredictorConfig config, int input_dim, int output_dim,
            std::string prefix = "predictor.");

  void init(ParamMap& params, std::mt19937_64& rng) const;
  Matrix forward(const ParamMap& params, const Matrix& x, Cache* cache) const;
  /// Returns dL/dx.
  Matrix backward(const ParamMap& params, const Cache& cache, const Matrix& dy,
                  ParamMap& grads) const;

  const PredictorConfig& config() const { return config_; }
  int output_dim() const { return output_dim_; }

 private:
  PredictorConfig config_;
  int input_dim_;
  int output_dim_;
  std::string prefix_;
  nn::TransformerStack stack_;
};

inline const std::string kMaskTokenName = "mask_token";

/// Encoder + predictor + mask token over a fixed patch grid. The same type
/// backs the M2D online network (predictor output = encoder width) and the
/// MAE baseline (decoder output = patch_dim).
struct Backbone {
  ShapeSpec shape;
  EncoderConfig encoder_config;
  PredictorConfig predictor_config;
  Encoder encoder;
  Predictor predictor;
  Matrix positions;  // num_patches x encoder width, fixed

  Backbone(ShapeSpec shape, EncoderConfig encoder_config, PredictorConfig predictor_config,
           int predictor_output_dim);

  int width() const { return encoder_config.width; }

  /// Online parameter set: encoder.*, predictor.* and mask_token (1 x width,
  /// normal(0, 0.02)).
  ParamMap init_online(std::uint64_t seed) const;
};

/// f(x_subset): encodes the given token rows with the matching position rows.
Matrix encode(const Encoder& encoder, const ParamMap& params, const Matrix& tokens,
              const Matrix& positions, Encoder::Cache* cache = nullptr);

/// Builds concat(z_v, m) + p in original grid order: rows plan.visible get
/// z_v, rows plan.masked get the shared mask token.
Matrix assemble_predictor_input(const Matrix& z_visible, const MaskPlan& plan,
                                const Matrix& mask_token, const Matrix& positions);

/// Full-length prediction g(concat(z_v, m) + p), one row per patch.
Matrix predict(const Backbone& model, const ParamMap& params, const Matrix& z_visible,
               const MaskPlan& plan, Predictor::Cache* cache = nullptr);

/// Rows of the prediction at the masked indices.
Matrix select_masked(const Matrix& prediction, const MaskPlan& plan);

/// Copies the encoder entries of an online parameter set (the momentum
/// encoder's initial state).
ParamMap encoder_params(const ParamMap& online, const std::string& prefix = "encoder.");

}  // namespace m2d
