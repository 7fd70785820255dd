#pragma once

// One M2D training step and its pieces: target standardization, the
// normalized-MSE loss, the EMA schedule, the momentum update, plus the
// all-patches target ablation and the MAE reconstruction baseline.
//
// Step order: sample a mask per clip, encode visible tokens online, predict
// the full sequence, keep masked rows, encode the target input with the
// momentum encoder (read-only, no cache, no gradient), standardize, compute
// the loss, AdamW on the online parameters, then EMA of the momentum encoder
// toward the updated online encoder.

#include "m2d/archive.hpp"
#include "m2d/backbone.hpp"
#include "m2d/optim.hpp"
#include "m2d/patch_core.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2d {

enum class TargetInput { masked_only, all_patches };
enum class Objective { m2d, mae_reconstruction };
enum class StandardizeAxis { per_token, per_feature };

inline constexpr double kStandardizeVarianceFloor = 1e-6;
inline constexpr double kPatchNormEps = 1e-6;

struct EmaSchedule {
  double tau_start = 0.99995;
  double tau_end = 0.99999;
  std::int64_t total_steps = 1;

  void validate() const;
};

/// tau_start + (tau_end - tau_start) * step / total_steps, for step in [0, total_steps].
double tau_at(const EmaSchedule& schedule, std::int64_t step);

/// xi <- tau * xi + (1 - tau) * theta over the keys of `target`. `online` may
/// hold extra keys (predictor, mask token); every target key must be present
/// in `online` with the same shape.
void ema_update(ParamMap& target, const ParamMap& online, double tau);

struct TrainConfig {
  double masking_ratio = 0.6;
  TargetInput target_input = TargetInput::masked_only;
  Objective objective = Objective::m2d;
  StandardizeAxis standardize_axis = StandardizeAxis::per_token;
  int epochs = 300;
  int warmup_epochs = 20;
  int batch_size = 2048;
  double base_lr = 3e-4;
  bool scale_lr_by_batch = true;  // peak lr = base_lr * batch_size / 256
  double min_lr = 0.0;
  std::int64_t steps_per_epoch = 1;
  double tau_start = 0.99995;
  double tau_end = 0.99999;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  std::filesystem::path dump_dir = ".";

  static TrainConfig full_scale();
  static TrainConfig mae_baseline();
  static TrainConfig toy();

  std::int64_t total_steps() const { return static_cast<std::int64_t>(epochs) * steps_per_epoch; }
  std::int64_t warmup_steps() const {
    return static_cast<std::int64_t>(warmup_epochs) * steps_per_epoch;
  }
  double peak_lr() const { return scale_lr_by_batch ? base_lr * batch_size / 256.0 : base_lr; }
  EmaSchedule ema_schedule() const { return {tau_start, tau_end, total_steps()}; }
  void validate() const;
};

struct LossReport {
  std::int64_t step = 0;
  double loss = 0.0;
  double tau = 0.0;
  double lr = 0.0;
  double target_feature_mean = 0.0;
  double target_feature_var = 0.0;

  nlohmann::json to_json() const;
};

/// Zero mean, unit variance per token across features (per_token) or per
/// feature across all rows (per_feature). Variance is floored at 1e-6.
Matrix standardize(const Matrix& z, StandardizeAxis axis = StandardizeAxis::per_token);

/// Mean over rows of 2 - 2 cos(pred_i, target_i). Throws on a zero-norm row.
/// When `d_pred` is given it receives dL/dpred.
double m2d_loss(const Matrix& pred, const Matrix& target, Matrix* d_pred = nullptr);

/// Per-patch pixel normalization of MAE targets: (x - mean) / sqrt(var + 1e-6),
/// var unbiased.
Matrix normalize_patches(const Matrix& patches);

/// Mean over rows and columns of (pred - target)^2.
double reconstruction_loss(const Matrix& pred, const Matrix& target, Matrix* d_pred = nullptr);

struct DuoState {
  Backbone model;
  TrainConfig config;
  ParamMap online;   // encoder.*, predictor.*, mask_token
  ParamMap target;   // momentum encoder, encoder.* only; empty for the MAE baseline
  AdamW optimizer;
  std::int64_t step = 0;
};

/// Random online parameters; the momentum encoder is an exact copy of the
/// online encoder. Predictor output width is the encoder width for m2d and
/// patch_dim for the MAE baseline.
DuoState init_duo(const ShapeSpec& shape, const EncoderConfig& encoder,
                  const PredictorConfig& predictor, const TrainConfig& config,
                  std::uint64_t seed);

/// Instrumentation: what each clip's momentum encoder actually received.
struct StepTrace {
  std::vector<MaskPlan> plans;
  std::vector<std::vector<int>> target_indices;
};

struct ObjectiveEvaluation {
  double loss = 0.0;
  double target_feature_mean = 0.0;
  double target_feature_var = 0.0;
  std::optional<ParamMap> grads;  // keyed like the online parameters
};

/// Loss (and optionally dL/dtheta) of the M2D objective for fixed masks.
/// Target parameters are read-only here.
ObjectiveEvaluation m2d_objective(const Backbone& model, const ParamMap& online,
                                  const ParamMap& target, std::span<const PatchSequence> batch,
                                  std::span<const MaskPlan> plans, const TrainConfig& config,
                                  bool with_grads, StepTrace* trace = nullptr);

/// Loss (and optionally gradients) of the MAE reconstruction objective.
ObjectiveEvaluation mae_objective(const Backbone& model, const ParamMap& online,
                                  std::span<const PatchSequence> batch,
                                  std::span<const MaskPlan> plans, bool with_grads);

/// Deterministic mask seed for (run seed, step, clip).
std::uint64_t mask_seed(std::uint64_t run_seed, std::int64_t step, std::size_t clip);

/// Raised when a step produces a non-finite loss. The state at the start of
/// the failing step has been written to dump_path().
class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, std::filesystem::path dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const std::filesystem::path& dump_path() const { return dump_; }

 private:
  std::filesystem::path dump_;
};

LossReport training_step(DuoState& state, std::span<const PatchSequence> batch,
                         StepTrace* trace = nullptr);
LossReport training_step(DuoState& state, std::span<const InputGrid> batch,
                         StepTrace* trace = nullptr);
LossReport mae_baseline_step(DuoState& state, std::span<const PatchSequence> batch,
                             StepTrace* trace = nullptr);
/// Dispatches on state.config.objective.
LossReport train_step(DuoState& state, std::span<const PatchSequence> batch,
                      StepTrace* trace = nullptr);

/// Full training state (online, target, optimizer moments, step, configs).
Archive save_state(const DuoState& state);
void save_state(const DuoState& state, const std::filesystem::path& path);
DuoState load_state(const std::filesystem::path& path);

/// Online encoder only, plus provenance: grid shape, encoder config, masking
/// ratio, EMA schedule, objective, and optional preprocessing statistics.
Archive export_encoder(const DuoState& state,
                       const nlohmann::json& preprocessing = nlohmann::json::object());
void export_encoder(const DuoState& state, const std::filesystem::path& path,
                    const nlohmann::json& preprocessing = nlohmann::json::object());

struct EncoderCheckpoint {
  ShapeSpec shape;
  EncoderConfig config;
  ParamMap params;  // encoder.*
  nlohmann::json meta;

  Encoder encoder() const { return Encoder(config, shape.patch_dim()); }
  Matrix positions() const { return positional_encoding(shape, config.width); }
};

EncoderCheckpoint load_encoder(const std::filesystem::path& path);
EncoderCheckpoint encoder_checkpoint(const Archive& archive);

}  // namespace m2d
