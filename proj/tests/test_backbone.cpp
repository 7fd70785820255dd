#include "m2d/backbone.hpp"
#include "m2d/nn.hpp"

#include "support/finite_difference.hpp"

#include <doctest.h>

#include <numeric>
#include <random>

using namespace m2d;
using m2d::testing::central_difference;
using m2d::testing::relative_error;
using m2d::testing::sample_entries;

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
  return m;
}

// Weighted sum of outputs, a generic scalar probe for gradient checks.
double probe(const Matrix& y, const Matrix& w) { return (y.array() * w.array()).sum(); }

}  // namespace

TEST_CASE("encoder: shape contract") {
  const ShapeSpec shape{16, 1, 5, 38};
  const Encoder enc(EncoderConfig::toy(), shape.patch_dim());
  ParamMap params;
  std::mt19937_64 rng(1);
  enc.init(params, rng);
  const auto pos = positional_encoding(shape, 96);
  const auto plan = sample_mask(190, 0.6, 3);
  const Matrix tokens = random_matrix(190, 256, 2);
  const Matrix z = encode(enc, params, select(tokens, plan.visible), select(pos, plan.visible));
  CHECK(z.rows() == 76);
  CHECK(z.cols() == 96);
  CHECK(z.allFinite());
  // Eval-mode determinism.
  CHECK(z == encode(enc, params, select(tokens, plan.visible), select(pos, plan.visible)));
}

TEST_CASE("encoder: base preset is ViT-Base") {
  const auto c = EncoderConfig::vit_base();
  CHECK(c.depth == 12);
  CHECK(c.heads == 12);
  CHECK(c.width == 768);
  const auto p = PredictorConfig::msm_mae();
  CHECK(p.depth == 4);
  CHECK(p.heads == 6);
  CHECK(p.width == 384);
}

TEST_CASE("encoder: depth 0 returns patch embedding plus positions") {
  const Encoder enc(EncoderConfig{0, 4, 8, 4.0}, 6);
  ParamMap params;
  std::mt19937_64 rng(4);
  enc.init(params, rng);
  const Matrix tokens = random_matrix(5, 6, 5);
  const Matrix pos = random_matrix(5, 8, 6);
  const Matrix expected = tokens * params.at("encoder.patch_embed.weight") +
                          params.at("encoder.patch_embed.bias").replicate(5, 1) + pos;
  CHECK((encode(enc, params, tokens, pos) - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("encoder: rejects misaligned rows") {
  const Encoder enc(EncoderConfig{1, 2, 8, 2.0}, 6);
  ParamMap params;
  std::mt19937_64 rng(4);
  enc.init(params, rng);
  CHECK_THROWS_AS(encode(enc, params, random_matrix(5, 6, 1), random_matrix(4, 8, 2)),
                  std::invalid_argument);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(EncoderConfig({2, 5, 96, 4.0}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(EncoderConfig({2, 4, 98, 4.0}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(PredictorConfig({2, 5, 48, 4.0}).validate(), std::invalid_argument);
  CHECK_NOTHROW(PredictorConfig({0, 0, 0, 4.0}).validate());
}

TEST_CASE("encoder: permuting tokens with their positions permutes outputs") {
  const Encoder enc(EncoderConfig{2, 4, 16, 2.0}, 12);
  ParamMap params;
  std::mt19937_64 rng(7);
  enc.init(params, rng);
  const Matrix tokens = random_matrix(9, 12, 8);
  const Matrix pos = random_matrix(9, 16, 9);
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix pt(9, 12), pp(9, 16);
  for (int i = 0; i < 9; ++i) {
    pt.row(i) = tokens.row(perm[i]);
    pp.row(i) = pos.row(perm[i]);
  }
  const Matrix z = encode(enc, params, tokens, pos);
  const Matrix zp = encode(enc, params, pt, pp);
  for (int i = 0; i < 9; ++i) CHECK((zp.row(i) - z.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("predict: identity stub places z_v and mask tokens in grid order") {
  const ShapeSpec shape{2, 1, 3, 4};
  const Backbone model(shape, EncoderConfig{1, 2, 8, 2.0}, PredictorConfig{0, 0, 0, 4.0}, 8);
  const ParamMap params = model.init_online(3);
  const auto plan = sample_mask(12, 0.5, 4);
  const Matrix z_v = random_matrix(6, 8, 5);
  const Matrix z_hat = predict(model, params, z_v, plan);
  REQUIRE(z_hat.rows() == 12);
  const Matrix& m = params.at(kMaskTokenName);
  for (std::size_t k = 0; k < plan.visible.size(); ++k) {
    const int i = plan.visible[k];
    CHECK(z_hat.row(i) == z_v.row(k) + model.positions.row(i));
  }
  for (int i : plan.masked) CHECK(z_hat.row(i) == m.row(0) + model.positions.row(i));
}

TEST_CASE("predict: shapes, boundary ratios, determinism") {
  const ShapeSpec shape{16, 1, 5, 38};
  const Backbone model(shape, EncoderConfig::toy(), PredictorConfig::toy(), 96);
  const ParamMap params = model.init_online(1);
  const Matrix tokens = random_matrix(190, 256, 2);

  const auto plan = sample_mask(190, 0.6, 9);
  const Matrix z_v = encode(model.encoder, params, select(tokens, plan.visible),
                            select(model.positions, plan.visible));
  const Matrix z_hat = predict(model, params, z_v, plan);
  CHECK(z_hat.rows() == 190);
  CHECK(z_hat.cols() == 96);
  CHECK(select_masked(z_hat, plan).rows() == 114);

  // Same inputs and parameters under a second plan object with another seed
  // field but identical indices: no stochastic ops in the predictor.
  MaskPlan twin = plan;
  twin.seed = 12345;
  CHECK(predict(model, params, z_v, twin) == z_hat);

  const auto none = sample_mask(190, 0.0, 1);
  const Matrix z_all = encode(model.encoder, params, tokens, model.positions);
  const Matrix full = predict(model, params, z_all, none);
  CHECK(full.rows() == 190);
  CHECK(select_masked(full, none).rows() == 0);
  CHECK(select_masked(full, none).cols() == 96);
  CHECK(full.allFinite());

  CHECK_THROWS_AS(predict(model, params, z_v.topRows(10), plan), std::invalid_argument);
}

TEST_CASE("online init: deterministic, congruent target copy") {
  const ShapeSpec shape{4, 1, 2, 3};
  const Backbone model(shape, EncoderConfig{2, 2, 8, 2.0}, PredictorConfig{1, 2, 8, 2.0}, 8);
  const auto a = model.init_online(10);
  const auto b = model.init_online(10);
  const auto c = model.init_online(11);
  CHECK(congruent(a, b));
  bool same = true;
  for (const auto& [k, v] : a) same = same && v == b.at(k);
  CHECK(same);
  bool differs = false;
  for (const auto& [k, v] : a) differs = differs || v != c.at(k);
  CHECK(differs);
  const ParamMap target = encoder_params(a);
  CHECK(!target.empty());
  for (const auto& [k, v] : target) CHECK(k.rfind("encoder.", 0) == 0);
  CHECK(target.count(kMaskTokenName) == 0);
  ParamMap fresh;
  std::mt19937_64 rng(0);
  model.encoder.init(fresh, rng);
  CHECK(congruent(fresh, target));
}

TEST_CASE("stack, encoder and predictor gradients match finite differences") {
  const ShapeSpec shape{2, 1, 3, 4};
  const Backbone model(shape, EncoderConfig{2, 2, 8, 2.0}, PredictorConfig{2, 2, 8, 2.0}, 8);
  ParamMap params = model.init_online(21);
  // Perturb norms and biases away from their trivial initial values.
  std::mt19937_64 rng(22);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& [name, value] : params) {
    for (Eigen::Index k = 0; k < value.size(); ++k) value.data()[k] += jitter(rng);
  }
  const Matrix tokens = random_matrix(12, 4, 23);
  const auto plan = sample_mask(12, 0.5, 24);
  const Matrix weights = random_matrix(12, 8, 25);

  auto forward = [&](const ParamMap& p, Encoder::Cache* ec, Predictor::Cache* pc) {
    const Matrix z_v = encode(model.encoder, p, select(tokens, plan.visible),
                              select(model.positions, plan.visible), ec);
    return predict(model, p, z_v, plan, pc);
  };
  auto loss = [&](const ParamMap& p) { return probe(forward(p, nullptr, nullptr), weights); };

  Encoder::Cache ec;
  Predictor::Cache pc;
  forward(params, &ec, &pc);
  ParamMap grads = zeros_like(params);
  const Matrix d_in = model.predictor.backward(params, pc, weights, grads);
  for (int idx : plan.masked) grads.at(kMaskTokenName).row(0) += d_in.row(idx);
  model.encoder.backward(params, ec, select(d_in, plan.visible), grads);

  int checked = 0;
  for (const auto& e : sample_entries(params, 120, 26, {{kMaskTokenName, 0}})) {
    const double numeric = central_difference(params, e, loss);
    const double analytic = grads.at(e.name).data()[e.index];
    INFO(e.name << "[" << e.index << "] analytic " << analytic << " numeric " << numeric);
    CHECK(relative_error(analytic, numeric, 1e-5) < 1e-5);
    ++checked;
  }
  CHECK(checked == 120);
}
