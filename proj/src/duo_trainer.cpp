#include "m2d/duo_trainer.hpp"

#include "m2d/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace m2d {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::vector<int> all_indices(int n) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

void check_batch(const Backbone& model, std::span<const PatchSequence> batch,
                 std::span<const MaskPlan> plans) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  if (batch.size() != plans.size()) throw std::invalid_argument("one mask plan per clip required");
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (!(batch[b].shape == model.shape)) {
      throw std::invalid_argument("clip " + std::to_string(b) + " does not match the model grid");
    }
    if (plans[b].num_patches() != model.shape.num_patches()) {
      throw std::invalid_argument("mask plan size does not match the model grid");
    }
  }
}

}  // namespace

void EmaSchedule::validate() const {
  if (!(0.0 <= tau_start && tau_start <= tau_end && tau_end <= 1.0)) {
    throw std::invalid_argument("EMA schedule requires 0 <= tau_start <= tau_end <= 1");
  }
  if (total_steps < 1) throw std::invalid_argument("EMA schedule requires total_steps >= 1");
}

double tau_at(const EmaSchedule& schedule, std::int64_t step) {
  schedule.validate();
  if (step < 0 || step > schedule.total_steps) {
    std::ostringstream msg;
    msg << "step " << step << " outside [0, " << schedule.total_steps << "]";
    throw std::out_of_range(msg.str());
  }
  if (step == schedule.total_steps) return schedule.tau_end;
  return schedule.tau_start + (schedule.tau_end - schedule.tau_start) *
                                  static_cast<double>(step) /
                                  static_cast<double>(schedule.total_steps);
}

void ema_update(ParamMap& target, const ParamMap& online, double tau) {
  for (const auto& [name, value] : target) {
    auto it = online.find(name);
    if (it == online.end()) throw std::invalid_argument("ema_update: online has no " + name);
    if (it->second.rows() != value.rows() || it->second.cols() != value.cols()) {
      throw std::invalid_argument("ema_update: shape mismatch for " + name);
    }
  }
  for (auto& [name, value] : target) {
    value = tau * value + (1.0 - tau) * online.at(name);
  }
}

TrainConfig TrainConfig::full_scale() { return TrainConfig{}; }

TrainConfig TrainConfig::mae_baseline() {
  TrainConfig c;
  c.objective = Objective::mae_reconstruction;
  c.masking_ratio = 0.75;
  return c;
}

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.epochs = 300;
  c.warmup_epochs = 10;
  c.batch_size = 8;
  c.base_lr = 1e-3;
  c.scale_lr_by_batch = false;
  c.steps_per_epoch = 1;
  return c;
}

void TrainConfig::validate() const {
  if (!(masking_ratio >= 0.0 && masking_ratio <= 1.0)) {
    throw std::invalid_argument("masking_ratio must lie in [0, 1]");
  }
  if (epochs < 1 || steps_per_epoch < 1 || batch_size < 1) {
    throw std::invalid_argument("epochs, steps_per_epoch and batch_size must be >= 1");
  }
  if (warmup_epochs < 0 || warmup_epochs > epochs) {
    throw std::invalid_argument("warmup_epochs must lie in [0, epochs]");
  }
  if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
  ema_schedule().validate();
}

nlohmann::json LossReport::to_json() const {
  return {{"step", step},
          {"loss", loss},
          {"tau", tau},
          {"lr", lr},
          {"target_feature_mean", target_feature_mean},
          {"target_feature_var", target_feature_var}};
}

Matrix standardize(const Matrix& z, StandardizeAxis axis) {
  if (z.rows() < 1) throw std::invalid_argument("standardize: no tokens");
  Matrix out(z.rows(), z.cols());
  if (axis == StandardizeAxis::per_token) {
    const double d = static_cast<double>(z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double mean = z.row(i).sum() / d;
      const double var = (z.row(i).array() - mean).square().sum() / d;
      out.row(i) = (z.row(i).array() - mean) / std::sqrt(std::max(var, kStandardizeVarianceFloor));
    }
  } else {
    const double n = static_cast<double>(z.rows());
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      const double mean = z.col(j).sum() / n;
      const double var = (z.col(j).array() - mean).square().sum() / n;
      out.col(j) = (z.col(j).array() - mean) / std::sqrt(std::max(var, kStandardizeVarianceFloor));
    }
  }
  return out;
}

double m2d_loss(const Matrix& pred, const Matrix& target, Matrix* d_pred) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw std::invalid_argument("m2d_loss: prediction and target shapes differ");
  }
  if (pred.rows() < 1) throw std::invalid_argument("m2d_loss: no tokens");
  const double n = static_cast<double>(pred.rows());
  if (d_pred) d_pred->resize(pred.rows(), pred.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    const double np = pred.row(i).norm();
    const double nt = target.row(i).norm();
    if (np == 0.0 || nt == 0.0) {
      std::ostringstream msg;
      msg << "m2d_loss: row " << i << " has zero norm (" << (np == 0.0 ? "prediction" : "target")
          << "), cannot l2-normalize";
      throw std::invalid_argument(msg.str());
    }
    const RowVector u = pred.row(i) / np;
    const RowVector v = target.row(i) / nt;
    total += (u - v).squaredNorm();
    if (d_pred) d_pred->row(i) = (2.0 / (n * np)) * (u * u.dot(v) - v);
  }
  return total / n;
}

Matrix normalize_patches(const Matrix& patches) {
  Matrix out(patches.rows(), patches.cols());
  const double d = static_cast<double>(patches.cols());
  for (Eigen::Index i = 0; i < patches.rows(); ++i) {
    const double mean = patches.row(i).sum() / d;
    const double ss = (patches.row(i).array() - mean).square().sum();
    const double var = patches.cols() > 1 ? ss / (d - 1.0) : 0.0;
    out.row(i) = (patches.row(i).array() - mean) / std::sqrt(var + kPatchNormEps);
  }
  return out;
}

double reconstruction_loss(const Matrix& pred, const Matrix& target, Matrix* d_pred) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw std::invalid_argument("reconstruction_loss: shapes differ");
  }
  if (pred.size() == 0) throw std::invalid_argument("reconstruction_loss: no patches");
  const Matrix diff = pred - target;
  const double count = static_cast<double>(pred.size());
  if (d_pred) *d_pred = (2.0 / count) * diff;
  return diff.squaredNorm() / count;
}

DuoState init_duo(const ShapeSpec& shape, const EncoderConfig& encoder,
                  const PredictorConfig& predictor, const TrainConfig& config,
                  std::uint64_t seed) {
  config.validate();
  const int out_dim =
      config.objective == Objective::m2d ? encoder.width : shape.patch_dim();
  DuoState state{Backbone(shape, encoder, predictor, out_dim), config, {}, {}, AdamW(config.adamw), 0};
  state.online = state.model.init_online(seed);
  if (config.objective == Objective::m2d) state.target = encoder_params(state.online);
  return state;
}

std::uint64_t mask_seed(std::uint64_t run_seed, std::int64_t step, std::size_t clip) {
  return splitmix64(splitmix64(splitmix64(run_seed) ^ static_cast<std::uint64_t>(step)) ^
                    static_cast<std::uint64_t>(clip));
}

ObjectiveEvaluation m2d_objective(const Backbone& model, const ParamMap& online,
                                  const ParamMap& target, std::span<const PatchSequence> batch,
                                  std::span<const MaskPlan> plans, const TrainConfig& config,
                                  bool with_grads, StepTrace* trace) {
  check_batch(model, batch, plans);
  const std::size_t B = batch.size();
  const int N = model.shape.num_patches();
  const int D = model.width();

  // Training signal from the momentum encoder. No cache is requested, so no
  // backward pass can ever reach the target parameters.
  std::vector<Matrix> raw(B);
  Eigen::Index total_rows = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (plans[b].masked.empty()) throw std::invalid_argument("mask plan has no masked patches");
    const std::vector<int> fed = config.target_input == TargetInput::masked_only
                                     ? plans[b].masked
                                     : all_indices(N);
    if (trace) trace->target_indices.push_back(fed);
    const Matrix z = model.encoder.forward(target, select(batch[b].tokens, fed),
                                           select(model.positions, fed), nullptr);
    raw[b] = config.target_input == TargetInput::masked_only ? z : select(z, plans[b].masked);
    total_rows += raw[b].rows();
  }

  Matrix stacked(total_rows, D);
  {
    Eigen::Index r = 0;
    for (const auto& z : raw) {
      stacked.middleRows(r, z.rows()) = z;
      r += z.rows();
    }
  }
  ObjectiveEvaluation eval;
  eval.target_feature_mean = stacked.mean();
  {
    const RowVector col_mean = stacked.colwise().mean();
    eval.target_feature_var =
        (stacked.rowwise() - col_mean).array().square().colwise().sum().mean() /
        static_cast<double>(total_rows);
  }

  std::vector<Matrix> signal(B);
  if (config.standardize_axis == StandardizeAxis::per_token) {
    for (std::size_t b = 0; b < B; ++b) signal[b] = standardize(raw[b], StandardizeAxis::per_token);
  } else {
    const Matrix all = standardize(stacked, StandardizeAxis::per_feature);
    Eigen::Index r = 0;
    for (std::size_t b = 0; b < B; ++b) {
      signal[b] = all.middleRows(r, raw[b].rows());
      r += raw[b].rows();
    }
  }

  if (with_grads) eval.grads = zeros_like(online);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const MaskPlan& plan = plans[b];
    Encoder::Cache enc_cache;
    Predictor::Cache pred_cache;
    const Matrix z_v = model.encoder.forward(online, select(batch[b].tokens, plan.visible),
                                             select(model.positions, plan.visible),
                                             with_grads ? &enc_cache : nullptr);
    const Matrix z_hat = predict(model, online, z_v, plan, with_grads ? &pred_cache : nullptr);
    const Matrix z_hat_m = select_masked(z_hat, plan);
    Matrix d_m;
    total += m2d_loss(z_hat_m, signal[b], with_grads ? &d_m : nullptr);
    if (!with_grads) continue;

    ParamMap& grads = *eval.grads;
    d_m /= static_cast<double>(B);
    Matrix d_hat = Matrix::Zero(N, z_hat.cols());
    for (std::size_t k = 0; k < plan.masked.size(); ++k) d_hat.row(plan.masked[k]) = d_m.row(k);
    const Matrix d_in = model.predictor.backward(online, pred_cache, d_hat, grads);
    Matrix& d_mask = grads.at(kMaskTokenName);
    for (int idx : plan.masked) d_mask.row(0) += d_in.row(idx);
    model.encoder.backward(online, enc_cache, select(d_in, plan.visible), grads);
  }
  eval.loss = total / static_cast<double>(B);
  return eval;
}

ObjectiveEvaluation mae_objective(const Backbone& model, const ParamMap& online,
                                  std::span<const PatchSequence> batch,
                                  std::span<const MaskPlan> plans, bool with_grads) {
  check_batch(model, batch, plans);
  if (model.predictor.output_dim() != model.shape.patch_dim()) {
    throw std::invalid_argument("MAE decoder must output patch_dim values per token");
  }
  const std::size_t B = batch.size();
  const int N = model.shape.num_patches();
  ObjectiveEvaluation eval;
  if (with_grads) eval.grads = zeros_like(online);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const MaskPlan& plan = plans[b];
    if (plan.masked.empty()) throw std::invalid_argument("mask plan has no masked patches");
    Encoder::Cache enc_cache;
    Predictor::Cache pred_cache;
    const Matrix z_v = model.encoder.forward(online, select(batch[b].tokens, plan.visible),
                                             select(model.positions, plan.visible),
                                             with_grads ? &enc_cache : nullptr);
    const Matrix recon = predict(model, online, z_v, plan, with_grads ? &pred_cache : nullptr);
    const Matrix target = normalize_patches(select(batch[b].tokens, plan.masked));
    Matrix d_m;
    total += reconstruction_loss(select(recon, plan.masked), target, with_grads ? &d_m : nullptr);
    if (!with_grads) continue;

    ParamMap& grads = *eval.grads;
    d_m /= static_cast<double>(B);
    Matrix d_recon = Matrix::Zero(N, recon.cols());
    for (std::size_t k = 0; k < plan.masked.size(); ++k) d_recon.row(plan.masked[k]) = d_m.row(k);
    const Matrix d_in = model.predictor.backward(online, pred_cache, d_recon, grads);
    Matrix& d_mask = grads.at(kMaskTokenName);
    for (int idx : plan.masked) d_mask.row(0) += d_in.row(idx);
    model.encoder.backward(online, enc_cache, select(d_in, plan.visible), grads);
  }
  eval.loss = total / static_cast<double>(B);
  return eval;
}

namespace {

std::vector<MaskPlan> plans_for_step(const DuoState& state, std::size_t batch_size) {
  std::vector<MaskPlan> plans;
  plans.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    plans.push_back(sample_mask(state.model.shape.num_patches(), state.config.masking_ratio,
                                mask_seed(state.config.seed, state.step, b)));
    if (plans.back().masked.empty()) {
      throw std::invalid_argument("masking ratio leaves no masked patches to learn from");
    }
  }
  return plans;
}

[[noreturn]] void abort_non_finite(const DuoState& state, double loss) {
  const auto path = state.config.dump_dir /
                    ("nonfinite_step_" + std::to_string(state.step) + ".m2dckpt");
  save_state(state, path);
  std::ostringstream msg;
  msg << "non-finite loss (" << loss << ") or gradient at step " << state.step
      << "; state dumped to " << path.string();
  throw NonFiniteLossError(msg.str(), path);
}

LossReport apply_update(DuoState& state, const ObjectiveEvaluation& eval) {
  if (!std::isfinite(eval.loss) || !all_finite(*eval.grads)) abort_non_finite(state, eval.loss);
  const TrainConfig& c = state.config;
  LossReport report;
  report.step = state.step;
  report.loss = eval.loss;
  report.lr = warmup_cosine_lr(c.peak_lr(), c.min_lr, state.step, c.warmup_steps(), c.total_steps());
  report.target_feature_mean = eval.target_feature_mean;
  report.target_feature_var = eval.target_feature_var;

  state.optimizer.step(state.online, *eval.grads, report.lr);
  if (c.objective == Objective::m2d) {
    report.tau = tau_at(c.ema_schedule(), std::min(state.step, c.total_steps()));
    ema_update(state.target, state.online, report.tau);
  }
  ++state.step;
  return report;
}

}  // namespace

LossReport training_step(DuoState& state, std::span<const PatchSequence> batch, StepTrace* trace) {
  if (state.config.objective != Objective::m2d) {
    throw std::logic_error("training_step requires the m2d objective");
  }
  const auto plans = plans_for_step(state, batch.size());
  if (trace) {
    trace->plans = plans;
    trace->target_indices.clear();
  }
  const auto eval = m2d_objective(state.model, state.online, state.target, batch, plans,
                                  state.config, true, trace);
  return apply_update(state, eval);
}

LossReport training_step(DuoState& state, std::span<const InputGrid> batch, StepTrace* trace) {
  std::vector<PatchSequence> seqs;
  seqs.reserve(batch.size());
  for (const auto& grid : batch) seqs.push_back(partition(grid, state.model.shape.patch_size));
  return training_step(state, std::span<const PatchSequence>(seqs), trace);
}

LossReport mae_baseline_step(DuoState& state, std::span<const PatchSequence> batch,
                             StepTrace* trace) {
  if (state.config.objective != Objective::mae_reconstruction) {
    throw std::logic_error("mae_baseline_step requires the mae_reconstruction objective");
  }
  const auto plans = plans_for_step(state, batch.size());
  if (trace) {
    trace->plans = plans;
    trace->target_indices.assign(batch.size(), {});
  }
  const auto eval = mae_objective(state.model, state.online, batch, plans, true);
  return apply_update(state, eval);
}

LossReport train_step(DuoState& state, std::span<const PatchSequence> batch, StepTrace* trace) {
  return state.config.objective == Objective::m2d ? training_step(state, batch, trace)
                                                  : mae_baseline_step(state, batch, trace);
}

Archive save_state(const DuoState& state) {
  Archive archive;
  for (const auto& [name, value] : state.online) archive.tensors["online." + name] = value;
  for (const auto& [name, value] : state.target) archive.tensors["target." + name] = value;
  state.optimizer.save(archive);
  archive.meta["kind"] = "m2d-train-state";
  archive.meta["step"] = state.step;
  archive.meta["shape"] = state.model.shape;
  archive.meta["encoder"] = state.model.encoder_config;
  archive.meta["predictor"] = state.model.predictor_config;
  archive.meta["train"] = state.config;
  return archive;
}

void save_state(const DuoState& state, const std::filesystem::path& path) {
  write_archive(path, save_state(state));
}

DuoState load_state(const std::filesystem::path& path) {
  const Archive archive = read_archive(path);
  if (archive.meta.value("kind", "") != "m2d-train-state") {
    throw std::runtime_error(path.string() + " is not an m2d training-state archive");
  }
  const auto shape = archive.meta.at("shape").get<ShapeSpec>();
  const auto enc = archive.meta.at("encoder").get<EncoderConfig>();
  const auto pred = archive.meta.at("predictor").get<PredictorConfig>();
  const auto cfg = archive.meta.at("train").get<TrainConfig>();
  const int out_dim = cfg.objective == Objective::m2d ? enc.width : shape.patch_dim();
  DuoState state{Backbone(shape, enc, pred, out_dim), cfg, {}, {}, AdamW(cfg.adamw), 0};
  for (const auto& [name, value] : archive.tensors) {
    if (name.rfind("online.", 0) == 0) state.online[name.substr(7)] = value;
    if (name.rfind("target.", 0) == 0) state.target[name.substr(7)] = value;
  }
  if (archive.meta.contains("optimizer")) state.optimizer.load(archive);
  state.step = archive.meta.at("step").get<std::int64_t>();
  const ParamMap reference = state.model.init_online(0);
  if (!congruent(reference, state.online)) {
    throw std::runtime_error(path.string() + ": online parameters do not match the recorded model");
  }
  return state;
}

Archive export_encoder(const DuoState& state, const nlohmann::json& preprocessing) {
  Archive archive;
  archive.tensors = encoder_params(state.online);
  const TrainConfig& c = state.config;
  archive.meta["kind"] = "m2d-encoder";
  archive.meta["shape"] = state.model.shape;
  archive.meta["encoder"] = state.model.encoder_config;
  archive.meta["objective"] = c.objective;
  archive.meta["masking_ratio"] = c.masking_ratio;
  archive.meta["target_input"] = c.target_input;
  archive.meta["ema"] = {{"tau_start", c.tau_start},
                         {"tau_end", c.tau_end},
                         {"total_steps", c.total_steps()}};
  archive.meta["step"] = state.step;
  archive.meta["seed"] = c.seed;
  archive.meta["preprocessing"] = preprocessing;
  return archive;
}

void export_encoder(const DuoState& state, const std::filesystem::path& path,
                    const nlohmann::json& preprocessing) {
  write_archive(path, export_encoder(state, preprocessing));
}

EncoderCheckpoint encoder_checkpoint(const Archive& archive) {
  const std::string kind = archive.meta.value("kind", "");
  EncoderCheckpoint ckpt;
  ckpt.meta = archive.meta;
  ckpt.shape = archive.meta.at("shape").get<ShapeSpec>();
  ckpt.config = archive.meta.at("encoder").get<EncoderConfig>();
  if (kind == "m2d-encoder") {
    ckpt.params = archive.tensors;
  } else if (kind == "m2d-train-state") {
    for (const auto& [name, value] : archive.tensors) {
      if (name.rfind("online.encoder.", 0) == 0) ckpt.params[name.substr(7)] = value;
    }
  } else {
    throw std::runtime_error("archive kind '" + kind + "' holds no encoder");
  }
  ParamMap reference;
  std::mt19937_64 rng(0);
  ckpt.encoder().init(reference, rng);
  if (!congruent(reference, ckpt.params)) {
    throw std::runtime_error("encoder parameters do not match the recorded encoder config");
  }
  return ckpt;
}

EncoderCheckpoint load_encoder(const std::filesystem::path& path) {
  return encoder_checkpoint(read_archive(path));
}

}  // namespace m2d
