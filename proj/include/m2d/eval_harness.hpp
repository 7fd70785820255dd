#pragma once

// Downstream evaluation: metrics, linear probe on frozen clip features,
// spectrogram augmentations, and full fine-tuning.

#include "m2d/duo_trainer.hpp"
#include "m2d/feature_head.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace m2d {

enum class MetricKind { top1_accuracy, mAP };

std::string to_string(MetricKind kind);
MetricKind metric_from_string(const std::string& name);

/// Fraction of rows whose argmax score is the argmax target.
double top1_accuracy(const Matrix& scores, const Matrix& targets);
/// Average precision of one class: mean over positives of the precision at
/// the positive's score threshold (ties share a threshold). Throws when
/// there are no positives.
double average_precision(std::span<const double> scores, std::span<const double> targets);
/// Macro mean of per-class AP over classes with at least one positive.
double mean_average_precision(const Matrix& scores, const Matrix& targets);
double evaluate_metric(MetricKind kind, const Matrix& scores, const Matrix& targets);

/// Clips with targets. Targets are one-hot (single label) or multi-hot rows.
struct TaskData {
  std::vector<Matrix> spectrograms;  // normalized, n_mels x frames
  Matrix targets;
  std::vector<std::string> class_names;
  bool multi_label = false;

  std::size_t size() const { return spectrograms.size(); }
  TaskData subset(std::span<const std::size_t> indices) const;
};

/// Random split; returns {train, test} index lists, both sorted.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_test_split(
    std::size_t n, double test_fraction, std::uint64_t seed);

/// z'' per clip from a frozen encoder. Clips longer than the model grid are
/// split into consecutive windows and summarized with long_clip_feature.
Matrix extract_features(const EncoderCheckpoint& encoder, std::span<const Matrix> spectrograms);

/// An encoder checkpoint with freshly initialized parameters.
EncoderCheckpoint random_encoder(const ShapeSpec& shape, const EncoderConfig& config,
                                 std::uint64_t seed);

struct ProbeConfig {
  int epochs = 100;
  int batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  MetricKind metric = MetricKind::top1_accuracy;
  std::uint64_t seed = 0;
};

struct ProbeReport {
  MetricKind metric = MetricKind::top1_accuracy;
  double value = 0.0;
  double train_value = 0.0;
  double final_loss = 0.0;
  nlohmann::json to_json() const;
};

/// Trains a single linear layer on standardized features (mean and std from
/// the training rows) with minibatch SGD and a cosine learning rate, softmax
/// cross-entropy for one-hot targets and sigmoid BCE for multi-hot.
ProbeReport linear_probe(const Matrix& train_x, const Matrix& train_y, const Matrix& test_x,
                         const Matrix& test_y, const ProbeConfig& cfg, bool multi_label = false);

/// Feature extraction through `encoder` followed by linear_probe. The encoder
/// is taken by const reference and never modified.
ProbeReport probe_encoder(const EncoderCheckpoint& encoder, const TaskData& train,
                          const TaskData& test, const ProbeConfig& cfg);

// Augmentations.

/// lambda * a + (1 - lambda) * b.
Matrix mix_pair(const Matrix& a, const Matrix& b, double lambda);
/// Beta(alpha, alpha) via two gamma draws; alpha <= 0 gives 1.
double sample_mixup_lambda(double alpha, std::mt19937_64& rng);

struct MixupResult {
  std::vector<Matrix> inputs;
  Matrix targets;
  double lambda = 1.0;
  std::vector<std::size_t> partner;
};
/// One lambda per batch; clip i is mixed with clip partner[i] (a random
/// permutation). alpha = 0 returns the batch unchanged.
MixupResult mixup(std::span<const Matrix> batch, const Matrix& targets, double alpha,
                  std::mt19937_64& rng);

struct RrcConfig {
  double freq_scale_min = 0.6;
  double freq_scale_max = 1.0;
  double time_scale_min = 0.6;
  double time_scale_max = 1.0;
};

/// Bilinear resize with corner-aligned sampling.
Matrix resize_bilinear(const Matrix& src, int rows, int cols);
/// Crop a rows x cols window at (top, left) and resize back to the input shape.
Matrix resize_crop(const Matrix& spec, int top, int left, int rows, int cols);
/// Random crop size from the scale ranges, random position, resize back.
Matrix random_resize_crop(const Matrix& spec, const RrcConfig& cfg, std::mt19937_64& rng);

/// Token indices kept after patchout, sorted. Structured mode drops whole
/// frequency rows and time columns of the patch grid (balancing the dropped
/// fraction of each axis) until at least ratio * N tokens are gone, always
/// keeping one row and one column. Unstructured mode keeps a random
/// floor(N * (1 - ratio)) subset.
std::vector<int> structured_patchout(const ShapeSpec& shape, double ratio, std::uint64_t seed,
                                     bool structured = true);

// Fine-tuning.

enum class OptimizerKind { sgd, adamw };

struct FineTuneConfig {
  double lr = 0.001;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double mixup_alpha = 0.0;
  bool rrc = false;
  RrcConfig rrc_config;
  double spo_ratio = 0.0;
  bool spo_structured = true;
  int epochs = 200;
  int warmup_epochs = 5;
  int batch_size = 32;
  double weight_decay = 0.0;
  double momentum = 0.9;
  MetricKind metric = MetricKind::top1_accuracy;
  std::uint64_t seed = 0;

  static FineTuneConfig as20k();
  static FineTuneConfig vc1();
  void validate() const;
};

struct FineTuneReport {
  MetricKind metric = MetricKind::top1_accuracy;
  std::vector<double> epoch_values;
  std::vector<double> epoch_losses;
  double value = 0.0;
  ParamMap params;  // encoder.* and head.*
  nlohmann::json to_json() const;
};

/// Classifier input: masked_mean_feature over kept tokens (D wide) when
/// spo_ratio > 0, z'' (N_F * D wide) otherwise.
int head_input_dim(const EncoderCheckpoint& encoder, const FineTuneConfig& cfg);

/// Eval-mode logits (no augmentation, every token kept).
Matrix fine_tune_scores(const EncoderCheckpoint& encoder, const ParamMap& params,
                        const FineTuneConfig& cfg, std::span<const Matrix> spectrograms);

/// Encoder plus linear head trained end to end with warm-up + cosine
/// learning rate per step. `on_epoch` receives {"epoch", "loss", metric}.
FineTuneReport fine_tune(const EncoderCheckpoint& encoder, const TaskData& train,
                         const TaskData& test, const FineTuneConfig& cfg,
                         const std::function<void(const nlohmann::json&)>& on_epoch = {});

}  // namespace m2d
