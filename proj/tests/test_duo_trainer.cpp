#include "m2d/duo_trainer.hpp"
#include "m2d/json_io.hpp"

#include "support/finite_difference.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

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

std::vector<PatchSequence> random_batch(const ShapeSpec& shape, int clips, std::uint64_t seed) {
  std::vector<PatchSequence> batch;
  for (int b = 0; b < clips; ++b) {
    batch.push_back({random_matrix(shape.num_patches(), shape.patch_dim(), seed + b), shape});
  }
  return batch;
}

// Small grid that still exercises every code path quickly: 4x6 tokens of 16 values.
const ShapeSpec kSmall{4, 1, 4, 6};

TrainConfig small_config() {
  TrainConfig c = TrainConfig::toy();
  c.epochs = 50;
  c.warmup_epochs = 5;
  return c;
}

DuoState small_state(const TrainConfig& c, std::uint64_t seed = 1) {
  return init_duo(kSmall, EncoderConfig{2, 2, 16, 2.0}, PredictorConfig{1, 2, 8, 2.0}, c, seed);
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("m2d_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

bool same_params(const ParamMap& a, const ParamMap& b) {
  if (!congruent(a, b)) return false;
  for (const auto& [k, v] : a) {
    if (v != b.at(k)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("standardize: per token") {
  Matrix z(2, 2);
  z << 1, 3, 5, 5;
  const Matrix s = standardize(z);
  CHECK(s(0, 0) == doctest::Approx(-1.0));
  CHECK(s(0, 1) == doctest::Approx(1.0));
  CHECK(s(1, 0) == 0.0);
  CHECK(s(1, 1) == 0.0);

  const Matrix r = standardize(random_matrix(20, 32, 3, 4.0));
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    const double mean = r.row(i).mean();
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs((r.row(i).array() - mean).square().mean() - 1.0) < 1e-4);
  }
}

TEST_CASE("standardize: per feature") {
  const Matrix r = standardize(random_matrix(50, 8, 4, 3.0), StandardizeAxis::per_feature);
  for (Eigen::Index j = 0; j < r.cols(); ++j) {
    CHECK(std::abs(r.col(j).mean()) < 1e-6);
    CHECK(std::abs(r.col(j).array().square().mean() - 1.0) < 1e-4);
  }
}

TEST_CASE("m2d_loss: boundary values") {
  Matrix a(1, 3), b(1, 3);
  a << 1, 2, 3;
  CHECK(m2d_loss(a, a) == 0.0);
  CHECK(m2d_loss(a, 2.5 * a) < 1e-15);
  CHECK(m2d_loss(a, -a) == 4.0);
  a << 1, 0, 0;
  b << 0, 1, 0;
  CHECK(m2d_loss(a, b) == 2.0);
}

TEST_CASE("m2d_loss: equals 2 - 2 cos over random pairs") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = 1 + static_cast<int>(rng() % 64);
    const Matrix p = random_matrix(1, d, rng());
    const Matrix t = random_matrix(1, d, rng());
    const double cosine = p.row(0).dot(t.row(0)) / (p.norm() * t.norm());
    REQUIRE(std::abs(m2d_loss(p, t) - (2.0 - 2.0 * cosine)) < 1e-6);
  }
}

TEST_CASE("m2d_loss: averages rows and rejects zero-norm rows") {
  Matrix p(2, 2), t(2, 2);
  p << 1, 0, 1, 0;
  t << 1, 0, -1, 0;
  CHECK(m2d_loss(p, t) == 2.0);
  t.row(1).setZero();
  CHECK_THROWS_AS(m2d_loss(p, t), std::invalid_argument);
  CHECK_THROWS_AS(m2d_loss(p, Matrix(3, 2)), std::invalid_argument);
}

TEST_CASE("m2d_loss: gradient matches finite differences") {
  const Matrix p = random_matrix(3, 5, 1);
  const Matrix t = random_matrix(3, 5, 2);
  Matrix d;
  m2d_loss(p, t, &d);
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    Matrix hi = p, lo = p;
    hi.data()[k] += 1e-6;
    lo.data()[k] -= 1e-6;
    CHECK(d.data()[k] == doctest::Approx((m2d_loss(hi, t) - m2d_loss(lo, t)) / 2e-6).epsilon(1e-6));
  }
}

TEST_CASE("tau schedule") {
  const EmaSchedule s{0.99995, 0.99999, 1000};
  CHECK(tau_at(s, 0) == 0.99995);
  CHECK(tau_at(s, 1000) == 0.99999);
  CHECK(tau_at(s, 500) == doctest::Approx(0.99997).epsilon(1e-15));
  CHECK_THROWS_AS(tau_at(s, -1), std::out_of_range);
  CHECK_THROWS_AS(tau_at(s, 1001), std::out_of_range);
  CHECK_THROWS_AS(tau_at(EmaSchedule{0.9, 0.8, 10}, 0), std::invalid_argument);
}

TEST_CASE("ema_update") {
  ParamMap online{{"encoder.w", Matrix::Constant(2, 2, 1.0)}, {"predictor.w", Matrix::Ones(1, 1)}};
  ParamMap target{{"encoder.w", Matrix::Zero(2, 2)}};
  ParamMap t1 = target;
  ema_update(t1, online, 1.0);
  CHECK(t1.at("encoder.w") == Matrix::Zero(2, 2));
  ema_update(t1, online, 0.0);
  CHECK(t1.at("encoder.w") == online.at("encoder.w"));
  ema_update(target, online, 0.99995);
  CHECK(target.at("encoder.w")(0, 0) == doctest::Approx(5e-5).epsilon(1e-9));
  CHECK(target.count("predictor.w") == 0);

  ParamMap missing{{"encoder.other", Matrix::Zero(1, 1)}};
  CHECK_THROWS_AS(ema_update(missing, online, 0.5), std::invalid_argument);
}

TEST_CASE("train config presets and validation") {
  const auto p = TrainConfig::full_scale();
  CHECK(p.masking_ratio == 0.6);
  CHECK(p.epochs == 300);
  CHECK(p.warmup_epochs == 20);
  CHECK(p.batch_size == 2048);
  CHECK(p.base_lr == 3e-4);
  CHECK(p.peak_lr() == doctest::Approx(2.4e-3));
  CHECK(p.tau_start == 0.99995);
  CHECK(p.tau_end == 0.99999);
  CHECK(TrainConfig::mae_baseline().objective == Objective::mae_reconstruction);

  TrainConfig bad;
  bad.masking_ratio = 1.2;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = TrainConfig{};
  bad.warmup_epochs = 400;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  const nlohmann::json j = TrainConfig::toy();
  const auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("init_duo: target is a copy of the online encoder") {
  const auto a = small_state(small_config(), 5);
  CHECK(same_params(a.target, encoder_params(a.online)));
  CHECK(a.target.count(kMaskTokenName) == 0);
  for (const auto& [k, v] : a.target) CHECK(k.rfind("encoder.", 0) == 0);
  CHECK(same_params(small_state(small_config(), 5).online, a.online));
  CHECK(!same_params(small_state(small_config(), 6).online, a.online));
}

TEST_CASE("training step: finite loss in [0, 4], masked-only target input") {
  auto state = small_state(small_config());
  const auto batch = random_batch(kSmall, 3, 10);
  StepTrace trace;
  const auto r = training_step(state, batch, &trace);
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss >= 0.0);
  CHECK(r.loss <= 4.0);
  CHECK(r.tau == 0.99995);
  CHECK(r.step == 0);
  CHECK(state.step == 1);
  CHECK(r.target_feature_var > 0.0);
  REQUIRE(trace.plans.size() == 3);
  REQUIRE(trace.target_indices.size() == 3);
  for (std::size_t b = 0; b < 3; ++b) {
    CHECK(trace.target_indices[b] == trace.plans[b].masked);
    const std::set<int> visible(trace.plans[b].visible.begin(), trace.plans[b].visible.end());
    for (int idx : trace.target_indices[b]) CHECK(visible.count(idx) == 0);
  }
}

TEST_CASE("training step: all-patches ablation feeds every token") {
  auto cfg = small_config();
  cfg.target_input = TargetInput::all_patches;
  auto state = small_state(cfg);
  StepTrace trace;
  const auto r = training_step(state, random_batch(kSmall, 2, 10), &trace);
  CHECK(std::isfinite(r.loss));
  for (const auto& fed : trace.target_indices) CHECK(fed.size() == 24);
}

TEST_CASE("training step: loss differs between target modes for the same masks") {
  auto cfg = small_config();
  const auto state = small_state(cfg);
  const auto batch = random_batch(kSmall, 2, 20);
  const std::vector<MaskPlan> plans{sample_mask(24, 0.5, 1), sample_mask(24, 0.5, 2)};
  const double a = m2d_objective(state.model, state.online, state.target, batch, plans, cfg, false).loss;
  cfg.target_input = TargetInput::all_patches;
  const double b = m2d_objective(state.model, state.online, state.target, batch, plans, cfg, false).loss;
  CHECK(a != b);
}

TEST_CASE("training step: per-feature standardization runs") {
  auto cfg = small_config();
  cfg.standardize_axis = StandardizeAxis::per_feature;
  auto state = small_state(cfg);
  CHECK(std::isfinite(training_step(state, random_batch(kSmall, 2, 30)).loss));
}

TEST_CASE("training step: momentum encoder follows the EMA exactly, never the optimizer") {
  const auto cfg = small_config();
  auto state = small_state(cfg);
  const auto batch = random_batch(kSmall, 2, 40);
  for (int s = 0; s < 10; ++s) {
    const ParamMap before = state.target;
    const auto r = training_step(state, batch);
    const double tau = tau_at(cfg.ema_schedule(), s);
    CHECK(r.tau == tau);
    for (const auto& [k, v] : state.target) {
      const Matrix expected = tau * before.at(k) + (1.0 - tau) * state.online.at(k);
      CHECK((v - expected).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + expected.cwiseAbs().maxCoeff()));
    }
  }
  for (const auto& [k, v] : state.optimizer.first_moment()) CHECK(state.online.count(k) == 1);
  CHECK(congruent(state.optimizer.first_moment(), state.online));
  const std::vector<MaskPlan> plans{sample_mask(24, 0.6, 1), sample_mask(24, 0.6, 2)};
  const auto eval = m2d_objective(state.model, state.online, state.target, batch, plans, cfg, true);
  REQUIRE(eval.grads.has_value());
  CHECK(congruent(*eval.grads, state.online));
}

TEST_CASE("training step: accepts input grids") {
  auto state = small_state(small_config());
  std::vector<InputGrid> grids;
  for (const auto& seq : random_batch(kSmall, 2, 50)) grids.push_back(unpatch(seq, GridKind::spectrogram));
  CHECK(std::isfinite(training_step(state, grids).loss));
}

TEST_CASE("training step: rejects a ratio with nothing masked and mismatched clips") {
  auto cfg = small_config();
  cfg.masking_ratio = 0.0;
  auto state = small_state(cfg);
  CHECK_THROWS_AS(training_step(state, random_batch(kSmall, 1, 1)), std::invalid_argument);
  auto ok = small_state(small_config());
  CHECK_THROWS_AS(training_step(ok, random_batch(ShapeSpec{4, 1, 2, 6}, 1, 1)),
                  std::invalid_argument);
}

TEST_CASE("mae baseline step") {
  auto cfg = small_config();
  cfg.objective = Objective::mae_reconstruction;
  cfg.masking_ratio = 0.75;
  auto state = small_state(cfg);
  CHECK(state.target.empty());
  CHECK(state.model.predictor.output_dim() == 16);
  const auto r = mae_baseline_step(state, random_batch(kSmall, 2, 60));
  CHECK(std::isfinite(r.loss));
  CHECK(r.tau == 0.0);

  std::vector<PatchSequence> zeros{{Matrix::Zero(24, 16), kSmall}};
  CHECK(std::isfinite(train_step(state, zeros).loss));
  CHECK_THROWS_AS(training_step(state, zeros), std::logic_error);
}

TEST_CASE("normalize_patches and reconstruction_loss") {
  Matrix p(2, 3);
  p << 1, 2, 3, 4, 4, 4;
  const Matrix n = normalize_patches(p);
  const double s = std::sqrt(1.0 + 1e-6);
  CHECK(n(0, 0) == doctest::Approx(-1.0 / s));
  CHECK(n(0, 2) == doctest::Approx(1.0 / s));
  CHECK(n.row(1).isZero());
  CHECK(reconstruction_loss(n, n) == 0.0);
  Matrix q = n;
  q(0, 0) += 3.0;
  CHECK(reconstruction_loss(q, n) == doctest::Approx(9.0 / 6.0));
}

TEST_CASE("mask seeds differ across steps and clips") {
  std::set<std::uint64_t> seen;
  for (int step = 0; step < 20; ++step) {
    for (std::size_t clip = 0; clip < 20; ++clip) seen.insert(mask_seed(7, step, clip));
  }
  CHECK(seen.size() == 400);
  CHECK(mask_seed(7, 3, 4) == mask_seed(7, 3, 4));
  CHECK(mask_seed(7, 3, 4) != mask_seed(8, 3, 4));
}

TEST_CASE("determinism: same seed, same losses") {
  const auto batch = random_batch(kSmall, 2, 70);
  auto a = small_state(small_config(), 3);
  auto b = small_state(small_config(), 3);
  for (int s = 0; s < 5; ++s) CHECK(training_step(a, batch).loss == training_step(b, batch).loss);
}

TEST_CASE("encoder export round trip is bitwise") {
  auto state = small_state(small_config());
  const auto batch = random_batch(kSmall, 2, 80);
  training_step(state, batch);
  const auto dir = scratch_dir("export");
  const auto path = dir / "enc.m2dckpt";
  export_encoder(state, path, {{"mean", -4.5}, {"std", 2.0}});

  const Archive raw = read_archive(path);
  for (const auto& [k, v] : raw.tensors) CHECK(k.rfind("encoder.", 0) == 0);
  CHECK(raw.meta.at("masking_ratio") == 0.6);
  CHECK(raw.meta.at("ema").at("tau_start") == 0.99995);
  CHECK(raw.meta.at("ema").at("tau_end") == 0.99999);
  CHECK(raw.meta.at("preprocessing").at("mean") == -4.5);

  const auto ckpt = load_encoder(path);
  const Matrix x = batch[0].tokens;
  const Matrix original = encode(state.model.encoder, state.online, x, state.model.positions);
  const Matrix loaded = encode(ckpt.encoder(), ckpt.params, x, ckpt.positions());
  CHECK(original == loaded);
  std::filesystem::remove_all(dir);
}

TEST_CASE("resume restores online, target, optimizer and step") {
  const auto batch = random_batch(kSmall, 2, 90);
  auto state = small_state(small_config());
  for (int s = 0; s < 3; ++s) training_step(state, batch);
  const auto dir = scratch_dir("resume");
  save_state(state, dir / "state.m2dckpt");
  auto resumed = load_state(dir / "state.m2dckpt");
  CHECK(resumed.step == 3);
  CHECK(same_params(resumed.online, state.online));
  CHECK(same_params(resumed.target, state.target));
  CHECK(same_params(resumed.optimizer.first_moment(), state.optimizer.first_moment()));
  CHECK(same_params(resumed.optimizer.second_moment(), state.optimizer.second_moment()));
  CHECK(resumed.optimizer.steps() == state.optimizer.steps());
  for (int s = 0; s < 3; ++s) CHECK(training_step(resumed, batch).loss == training_step(state, batch).loss);
  CHECK(same_params(resumed.target, state.target));

  const auto ckpt = encoder_checkpoint(read_archive(dir / "state.m2dckpt"));
  CHECK(ckpt.params.count("encoder.patch_embed.weight") == 1);
  CHECK_THROWS_AS(load_state(dir / "missing.m2dckpt"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite loss dumps state and aborts") {
  auto cfg = small_config();
  const auto dir = scratch_dir("nonfinite");
  cfg.dump_dir = dir;
  auto state = small_state(cfg);
  auto batch = random_batch(kSmall, 1, 100);
  training_step(state, batch);
  for (int r = 0; r < 24; ++r) batch[0].tokens(r, 0) = std::nan("");
  try {
    training_step(state, batch);
    FAIL("expected NonFiniteLossError");
  } catch (const NonFiniteLossError& e) {
    CHECK(std::filesystem::exists(e.dump_path()));
    CHECK(e.dump_path().filename() == "nonfinite_step_1.m2dckpt");
    CHECK(load_state(e.dump_path()).step == 1);
  }
  CHECK(state.step == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("full objective gradient matches finite differences") {
  const ShapeSpec shape{2, 1, 3, 4};
  auto cfg = TrainConfig::toy();
  cfg.masking_ratio = 0.5;
  auto state = init_duo(shape, EncoderConfig{2, 2, 8, 2.0}, PredictorConfig{1, 2, 8, 2.0}, cfg, 31);
  std::mt19937_64 rng(32);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& [name, value] : state.online) {
    for (Eigen::Index k = 0; k < value.size(); ++k) value.data()[k] += jitter(rng);
  }
  state.target = encoder_params(state.online);
  for (auto& [name, value] : state.target) value.array() += 0.05;
  const auto batch = random_batch(shape, 2, 33);
  const std::vector<MaskPlan> plans{sample_mask(12, 0.5, 34), sample_mask(12, 0.5, 35)};

  auto loss = [&](const ParamMap& p) {
    return m2d_objective(state.model, p, state.target, batch, plans, cfg, false).loss;
  };
  const auto eval = m2d_objective(state.model, state.online, state.target, batch, plans, cfg, true);
  for (const auto& e : sample_entries(state.online, 60, 36, {{kMaskTokenName, 0}, {kMaskTokenName, 3}})) {
    const double numeric = central_difference(state.online, e, loss);
    const double analytic = eval.grads->at(e.name).data()[e.index];
    INFO(e.name << "[" << e.index << "] analytic " << analytic << " numeric " << numeric);
    CHECK(relative_error(analytic, numeric, 1e-5) < 1e-5);
  }
}
