#include "m2d/backbone.hpp"

#include <sstream>
#include <stdexcept>

namespace m2d {

void EncoderConfig::validate() const {
  if (width <= 0 || width % 4 != 0) {
    throw std::invalid_argument("encoder width must be a positive multiple of 4");
  }
  if (depth < 0) throw std::invalid_argument("encoder depth must be >= 0");
  if (depth > 0 && (heads < 1 || width % heads != 0)) {
    std::ostringstream msg;
    msg << "encoder width " << width << " is not divisible by " << heads << " heads";
    throw std::invalid_argument(msg.str());
  }
  if (mlp_ratio <= 0.0) throw std::invalid_argument("encoder mlp_ratio must be positive");
}

void PredictorConfig::validate() const {
  if (depth < 0) throw std::invalid_argument("predictor depth must be >= 0");
  if (depth == 0) return;
  if (width <= 0 || heads < 1 || width % heads != 0) {
    std::ostringstream msg;
    msg << "predictor width " << width << " is not divisible by " << heads << " heads";
    throw std::invalid_argument(msg.str());
  }
  if (mlp_ratio <= 0.0) throw std::invalid_argument("predictor mlp_ratio must be positive");
}

Encoder::Encoder(EncoderConfig config, int patch_dim, std::string prefix)
    : config_(config),
      patch_dim_(patch_dim),
      prefix_(std::move(prefix)),
      stack_(prefix_, {config.depth, config.heads, config.width, config.mlp_ratio}) {
  config_.validate();
  if (patch_dim_ < 1) throw std::invalid_argument("patch_dim must be >= 1");
}

void Encoder::init(ParamMap& params, std::mt19937_64& rng) const {
  params[prefix_ + "patch_embed.weight"] = nn::xavier_uniform(patch_dim_, config_.width, rng);
  params[prefix_ + "patch_embed.bias"] = Matrix::Zero(1, config_.width);
  stack_.init(params, rng);
  if (config_.depth > 0) {
    params[prefix_ + "norm.weight"] = Matrix::Ones(1, config_.width);
    params[prefix_ + "norm.bias"] = Matrix::Zero(1, config_.width);
  }
}

Matrix Encoder::forward(const ParamMap& params, const Matrix& tokens, const Matrix& positions,
                        Cache* cache) const {
  if (tokens.rows() != positions.rows()) {
    std::ostringstream msg;
    msg << "encode: " << tokens.rows() << " tokens but " << positions.rows() << " position rows";
    throw std::invalid_argument(msg.str());
  }
  if (tokens.cols() != patch_dim_ || positions.cols() != config_.width) {
    throw std::invalid_argument("encode: token or position width mismatch");
  }
  Matrix x = nn::linear_forward(tokens, params.at(prefix_ + "patch_embed.weight"),
                                params.at(prefix_ + "patch_embed.bias"));
  x += positions;
  if (config_.depth == 0) {
    if (cache) cache->tokens = tokens;
    return x;
  }
  Matrix h = stack_.forward(params, std::move(x), cache ? &cache->stack : nullptr);
  Matrix out = nn::layer_norm_forward(h, params.at(prefix_ + "norm.weight"),
                                      params.at(prefix_ + "norm.bias"),
                                      cache ? &cache->norm : nullptr);
  if (cache) {
    cache->tokens = tokens;
    cache->stack_out = std::move(h);
  }
  return out;
}

void Encoder::backward(const ParamMap& params, const Cache& cache, const Matrix& dy,
                       ParamMap& grads) const {
  Matrix dx = dy;
  if (config_.depth > 0) {
    dx = nn::layer_norm_backward(cache.norm, params.at(prefix_ + "norm.weight"), dy,
                                 grads.at(prefix_ + "norm.weight"),
                                 grads.at(prefix_ + "norm.bias"));
    dx = stack_.backward(params, cache.stack, std::move(dx), grads);
  }
  nn::linear_backward(cache.tokens, params.at(prefix_ + "patch_embed.weight"), dx,
                      grads.at(prefix_ + "patch_embed.weight"),
                      grads.at(prefix_ + "patch_embed.bias"));
}

Predictor::Predictor(PredictorConfig config, int input_dim, int output_dim, std::string prefix)
    : config_(config),
      input_dim_(input_dim),
      output_dim_(output_dim),
      prefix_(std::move(prefix)),
      stack_(prefix_, {config.depth, config.heads, config.width, config.mlp_ratio}) {
  config_.validate();
  if (config_.identity() && input_dim_ != output_dim_) {
    throw std::invalid_argument("identity predictor requires output_dim == input_dim");
  }
}

void Predictor::init(ParamMap& params, std::mt19937_64& rng) const {
  if (config_.identity()) return;
  params[prefix_ + "embed.weight"] = nn::xavier_uniform(input_dim_, config_.width, rng);
  params[prefix_ + "embed.bias"] = Matrix::Zero(1, config_.width);
  stack_.init(params, rng);
  params[prefix_ + "norm.weight"] = Matrix::Ones(1, config_.width);
  params[prefix_ + "norm.bias"] = Matrix::Zero(1, config_.width);
  params[prefix_ + "head.weight"] = nn::xavier_uniform(config_.width, output_dim_, rng);
  params[prefix_ + "head.bias"] = Matrix::Zero(1, output_dim_);
}

Matrix Predictor::forward(const ParamMap& params, const Matrix& x, Cache* cache) const {
  if (x.cols() != input_dim_) throw std::invalid_argument("predictor input width mismatch");
  if (config_.identity()) return x;
  Matrix e = nn::linear_forward(x, params.at(prefix_ + "embed.weight"),
                                params.at(prefix_ + "embed.bias"));
  Matrix h = stack_.forward(params, e, cache ? &cache->stack : nullptr);
  Matrix normed = nn::layer_norm_forward(h, params.at(prefix_ + "norm.weight"),
                                         params.at(prefix_ + "norm.bias"),
                                         cache ? &cache->norm : nullptr);
  Matrix out = nn::linear_forward(normed, params.at(prefix_ + "head.weight"),
                                  params.at(prefix_ + "head.bias"));
  if (cache) {
    cache->input = x;
    cache->embedded = std::move(e);
    cache->stack_out = std::move(h);
    cache->normed = std::move(normed);
  }
  return out;
}

Matrix Predictor::backward(const ParamMap& params, const Cache& cache, const Matrix& dy,
                           ParamMap& grads) const {
  if (config_.identity()) return dy;
  Matrix d = nn::linear_backward(cache.normed, params.at(prefix_ + "head.weight"), dy,
                                 grads.at(prefix_ + "head.weight"),
                                 grads.at(prefix_ + "head.bias"));
  d = nn::layer_norm_backward(cache.norm, params.at(prefix_ + "norm.weight"), d,
                              grads.at(prefix_ + "norm.weight"), grads.at(prefix_ + "norm.bias"));
  d = stack_.backward(params, cache.stack, std::move(d), grads);
  return nn::linear_backward(cache.input, params.at(prefix_ + "embed.weight"), d,
                             grads.at(prefix_ + "embed.weight"), grads.at(prefix_ + "embed.bias"));
}

Backbone::Backbone(ShapeSpec shape_, EncoderConfig encoder_config_,
                   PredictorConfig predictor_config_, int predictor_output_dim)
    : shape(shape_),
      encoder_config(encoder_config_),
      predictor_config(predictor_config_),
      encoder(encoder_config_, shape_.patch_dim()),
      predictor(predictor_config_, encoder_config_.width, predictor_output_dim),
      positions(positional_encoding(shape_, encoder_config_.width)) {}

ParamMap Backbone::init_online(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  ParamMap params;
  encoder.init(params, rng);
  predictor.init(params, rng);
  std::normal_distribution<double> normal(0.0, 0.02);
  Matrix mask(1, encoder_config.width);
  for (Eigen::Index k = 0; k < mask.size(); ++k) mask.data()[k] = normal(rng);
  params[kMaskTokenName] = std::move(mask);
  return params;
}

Matrix encode(const Encoder& encoder, const ParamMap& params, const Matrix& tokens,
              const Matrix& positions, Encoder::Cache* cache) {
  return encoder.forward(params, tokens, positions, cache);
}

Matrix assemble_predictor_input(const Matrix& z_visible, const MaskPlan& plan,
                                const Matrix& mask_token, const Matrix& positions) {
  const int n = plan.num_patches();
  if (z_visible.rows() != static_cast<Eigen::Index>(plan.visible.size())) {
    std::ostringstream msg;
    msg << "predict: " << z_visible.rows() << " visible representations but the plan has "
        << plan.visible.size() << " visible indices";
    throw std::invalid_argument(msg.str());
  }
  if (positions.rows() != n || mask_token.cols() != positions.cols() ||
      (z_visible.rows() > 0 && z_visible.cols() != positions.cols())) {
    throw std::invalid_argument("predict: width or grid size mismatch");
  }
  Matrix x = positions;
  for (std::size_t k = 0; k < plan.visible.size(); ++k) x.row(plan.visible[k]) += z_visible.row(k);
  for (int idx : plan.masked) x.row(idx) += mask_token.row(0);
  return x;
}

Matrix predict(const Backbone& model, const ParamMap& params, const Matrix& z_visible,
               const MaskPlan& plan, Predictor::Cache* cache) {
  const Matrix x =
      assemble_predictor_input(z_visible, plan, params.at(kMaskTokenName), model.positions);
  return model.predictor.forward(params, x, cache);
}

Matrix select_masked(const Matrix& prediction, const MaskPlan& plan) {
  return select(prediction, plan.masked);
}

ParamMap encoder_params(const ParamMap& online, const std::string& prefix) {
  return with_prefix(online, prefix);
}

}  // namespace m2d
