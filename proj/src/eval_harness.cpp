#include "m2d/eval_harness.hpp"

#include "m2d/audio_pipeline.hpp"
#include "m2d/nn.hpp"
#include "m2d/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace m2d {

std::string to_string(MetricKind kind) {
  return kind == MetricKind::mAP ? "mAP" : "top1_accuracy";
}

MetricKind metric_from_string(const std::string& name) {
  if (name == "mAP" || name == "map") return MetricKind::mAP;
  if (name == "top1_accuracy" || name == "accuracy") return MetricKind::top1_accuracy;
  throw std::invalid_argument("unknown metric '" + name + "'");
}

double top1_accuracy(const Matrix& scores, const Matrix& targets) {
  if (scores.rows() != targets.rows() || scores.cols() != targets.cols() || scores.rows() == 0) {
    throw std::invalid_argument("top1_accuracy: scores and targets must be non-empty and congruent");
  }
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index p, t;
    scores.row(i).maxCoeff(&p);
    targets.row(i).maxCoeff(&t);
    hits += p == t;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

double average_precision(std::span<const double> scores, std::span<const double> targets) {
  if (scores.size() != targets.size()) throw std::invalid_argument("average_precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double positives = 0.0;
  for (double t : targets) positives += t > 0.5;
  if (positives == 0.0) throw std::invalid_argument("average_precision: class has no positives");
  double sum = 0.0, seen = 0.0, hits = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double group_hits = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_hits += targets[order[j]] > 0.5;
      ++j;
    }
    seen += static_cast<double>(j - i);
    hits += group_hits;
    sum += group_hits * (hits / seen);
    i = j;
  }
  return sum / positives;
}

double mean_average_precision(const Matrix& scores, const Matrix& targets) {
  if (scores.rows() != targets.rows() || scores.cols() != targets.cols()) {
    throw std::invalid_argument("mean_average_precision: shape mismatch");
  }
  double total = 0.0;
  int classes = 0;
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    const Eigen::VectorXd s = scores.col(c);
    const Eigen::VectorXd t = targets.col(c);
    if ((t.array() > 0.5).count() == 0) continue;
    total += average_precision({s.data(), static_cast<std::size_t>(s.size())},
                               {t.data(), static_cast<std::size_t>(t.size())});
    ++classes;
  }
  if (classes == 0) throw std::invalid_argument("mean_average_precision: no class has positives");
  return total / classes;
}

double evaluate_metric(MetricKind kind, const Matrix& scores, const Matrix& targets) {
  return kind == MetricKind::mAP ? mean_average_precision(scores, targets)
                                 : top1_accuracy(scores, targets);
}

TaskData TaskData::subset(std::span<const std::size_t> indices) const {
  TaskData out;
  out.class_names = class_names;
  out.multi_label = multi_label;
  out.targets.resize(static_cast<Eigen::Index>(indices.size()), targets.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    out.spectrograms.push_back(spectrograms.at(indices[k]));
    out.targets.row(k) = targets.row(indices[k]);
  }
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_test_split(
    std::size_t n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(n * test_fraction)));
  if (n_test >= n) throw std::invalid_argument("split leaves no training clips");
  std::vector<std::size_t> test(order.begin(), order.begin() + n_test);
  std::vector<std::size_t> train(order.begin() + n_test, order.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {train, test};
}

namespace {

std::vector<PatchSequence> windows(const EncoderCheckpoint& enc, const Matrix& spec) {
  if (spec.rows() != enc.shape.height()) {
    throw std::invalid_argument("spectrogram has " + std::to_string(spec.rows()) +
                                " frequency bins, encoder expects " + std::to_string(enc.shape.height()));
  }
  std::vector<PatchSequence> out;
  for (const auto& clip : split_long(spec, enc.shape.width())) {
    out.push_back(partition(InputGrid::from_spectrogram(clip.spectrogram), enc.shape.patch_size));
  }
  return out;
}

}  // namespace

Matrix extract_features(const EncoderCheckpoint& enc, std::span<const Matrix> spectrograms) {
  const Encoder encoder = enc.encoder();
  const Matrix positions = enc.positions();
  const int width = enc.shape.n_freq * enc.config.width;
  Matrix features(static_cast<Eigen::Index>(spectrograms.size()), width);
  for (std::size_t i = 0; i < spectrograms.size(); ++i) {
    std::vector<Matrix> segments;
    for (const auto& seq : windows(enc, spectrograms[i])) {
      segments.push_back(frame_features(encode(encoder, enc.params, seq.tokens, positions), seq.shape));
    }
    features.row(i) = long_clip_feature(segments);
  }
  return features;
}

EncoderCheckpoint random_encoder(const ShapeSpec& shape, const EncoderConfig& config,
                                 std::uint64_t seed) {
  EncoderCheckpoint ckpt;
  ckpt.shape = shape;
  ckpt.config = config;
  std::mt19937_64 rng(seed);
  ckpt.encoder().init(ckpt.params, rng);
  ckpt.meta = {{"kind", "m2d-encoder"}, {"random_init_seed", seed}};
  return ckpt;
}

nlohmann::json ProbeReport::to_json() const {
  return {{"metric", to_string(metric)}, {"value", value}, {"train_value", train_value}, {"final_loss", final_loss}};
}

namespace {

// Loss and dL/dlogits for a batch; soft targets are allowed for softmax.
double head_loss(const Matrix& logits, const Matrix& targets, bool multi_label, Matrix* d_logits) {
  const double B = static_cast<double>(logits.rows());
  if (multi_label) {
    const double n = B * static_cast<double>(logits.cols());
    double loss = 0.0;
    if (d_logits) d_logits->resize(logits.rows(), logits.cols());
    for (Eigen::Index k = 0; k < logits.size(); ++k) {
      const double z = logits.data()[k], y = targets.data()[k];
      loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      if (d_logits) d_logits->data()[k] = (1.0 / (1.0 + std::exp(-z)) - y) / n;
    }
    return loss / n;
  }
  const Matrix p = nn::softmax_rows(logits);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    loss -= (targets.row(i).array() * (logits.row(i).array() - lse)).sum();
  }
  if (d_logits) *d_logits = (p - targets) / B;
  return loss / B;
}

Matrix rows_of(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(k) = m.row(idx[k]);
  return out;
}

}  // namespace

ProbeReport linear_probe(const Matrix& train_x, const Matrix& train_y, const Matrix& test_x,
                         const Matrix& test_y, const ProbeConfig& cfg, bool multi_label) {
  if (train_x.rows() != train_y.rows() || test_x.rows() != test_y.rows() ||
      train_x.cols() != test_x.cols() || train_y.cols() != test_y.cols()) {
    throw std::invalid_argument("linear_probe: inconsistent feature or target shapes");
  }
  if (train_y.cols() < 2) throw std::invalid_argument("linear_probe: at least 2 classes required");
  if (train_x.rows() < 1 || test_x.rows() < 1) throw std::invalid_argument("linear_probe: empty split");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("linear_probe: bad recipe");

  const RowVector mean = train_x.colwise().mean();
  RowVector std = ((train_x.rowwise() - mean).array().square().colwise().mean()).sqrt().matrix();
  std = std.cwiseMax(kStatsStdFloor);
  auto standardize_rows = [&](const Matrix& x) -> Matrix {
    return ((x.rowwise() - mean).array().rowwise() / std.array()).matrix();
  };
  const Matrix xs = standardize_rows(train_x);
  const Matrix xt = standardize_rows(test_x);

  ParamMap params{{"head.weight", Matrix::Zero(xs.cols(), train_y.cols())},
                  {"head.bias", Matrix::Zero(1, train_y.cols())}};
  Sgd opt({cfg.momentum, cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(xs.rows());
  std::iota(order.begin(), order.end(), 0);
  const std::int64_t per_epoch = (xs.rows() + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total = per_epoch * cfg.epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix x = rows_of(xs, idx);
      const Matrix logits = nn::linear_forward(x, params.at("head.weight"), params.at("head.bias"));
      Matrix d;
      head_loss(logits, rows_of(train_y, idx), multi_label, &d);
      ParamMap grads{{"head.weight", x.transpose() * d}, {"head.bias", d.colwise().sum()}};
      opt.step(params, grads, warmup_cosine_lr(cfg.lr, 0.0, step++, 0, total));
    }
  }
  auto logits = [&](const Matrix& x) {
    return nn::linear_forward(x, params.at("head.weight"), params.at("head.bias"));
  };
  ProbeReport report;
  report.metric = cfg.metric;
  report.value = evaluate_metric(cfg.metric, logits(xt), test_y);
  report.train_value = evaluate_metric(cfg.metric, logits(xs), train_y);
  report.final_loss = head_loss(logits(xs), train_y, multi_label, nullptr);
  return report;
}

ProbeReport probe_encoder(const EncoderCheckpoint& encoder, const TaskData& train,
                          const TaskData& test, const ProbeConfig& cfg) {
  return linear_probe(extract_features(encoder, train.spectrograms), train.targets,
                      extract_features(encoder, test.spectrograms), test.targets, cfg,
                      train.multi_label);
}

Matrix mix_pair(const Matrix& a, const Matrix& b, double lambda) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("mix_pair: shape mismatch");
  return lambda * a + (1.0 - lambda) * b;
}

double sample_mixup_lambda(double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) return 1.0;
  std::gamma_distribution<double> g(alpha, 1.0);
  const double x = g(rng), y = g(rng);
  return x + y > 0.0 ? x / (x + y) : 0.5;
}

MixupResult mixup(std::span<const Matrix> batch, const Matrix& targets, double alpha,
                  std::mt19937_64& rng) {
  if (static_cast<Eigen::Index>(batch.size()) != targets.rows()) {
    throw std::invalid_argument("mixup: one target row per clip required");
  }
  MixupResult out;
  out.partner.resize(batch.size());
  std::iota(out.partner.begin(), out.partner.end(), 0);
  out.inputs.assign(batch.begin(), batch.end());
  out.targets = targets;
  if (!(alpha > 0.0)) return out;
  out.lambda = sample_mixup_lambda(alpha, rng);
  std::shuffle(out.partner.begin(), out.partner.end(), rng);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.inputs[i] = mix_pair(batch[i], batch[out.partner[i]], out.lambda);
    out.targets.row(i) = out.lambda * targets.row(i) + (1.0 - out.lambda) * targets.row(out.partner[i]);
  }
  return out;
}

Matrix resize_bilinear(const Matrix& src, int rows, int cols) {
  if (src.rows() < 1 || src.cols() < 1 || rows < 1 || cols < 1) {
    throw std::invalid_argument("resize_bilinear: empty input or output");
  }
  Matrix out(rows, cols);
  auto coord = [](int i, int n_out, Eigen::Index n_in) {
    return n_out == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(n_in - 1) / (n_out - 1);
  };
  for (int r = 0; r < rows; ++r) {
    const double y = coord(r, rows, src.rows());
    const auto y0 = static_cast<Eigen::Index>(std::floor(y));
    const Eigen::Index y1 = std::min<Eigen::Index>(y0 + 1, src.rows() - 1);
    const double wy = y - static_cast<double>(y0);
    for (int c = 0; c < cols; ++c) {
      const double x = coord(c, cols, src.cols());
      const auto x0 = static_cast<Eigen::Index>(std::floor(x));
      const Eigen::Index x1 = std::min<Eigen::Index>(x0 + 1, src.cols() - 1);
      const double wx = x - static_cast<double>(x0);
      const double top = wx == 0.0 ? src(y0, x0) : (1 - wx) * src(y0, x0) + wx * src(y0, x1);
      const double bottom = wx == 0.0 ? src(y1, x0) : (1 - wx) * src(y1, x0) + wx * src(y1, x1);
      out(r, c) = wy == 0.0 ? top : (1 - wy) * top + wy * bottom;
    }
  }
  return out;
}

Matrix resize_crop(const Matrix& spec, int top, int left, int rows, int cols) {
  if (top < 0 || left < 0 || rows < 1 || cols < 1 || top + rows > spec.rows() || left + cols > spec.cols()) {
    throw std::invalid_argument("resize_crop: window outside the input");
  }
  return resize_bilinear(spec.block(top, left, rows, cols), static_cast<int>(spec.rows()),
                         static_cast<int>(spec.cols()));
}

Matrix random_resize_crop(const Matrix& spec, const RrcConfig& cfg, std::mt19937_64& rng) {
  if (!(0.0 < cfg.freq_scale_min && cfg.freq_scale_min <= cfg.freq_scale_max && cfg.freq_scale_max <= 1.0 &&
        0.0 < cfg.time_scale_min && cfg.time_scale_min <= cfg.time_scale_max && cfg.time_scale_max <= 1.0)) {
    throw std::invalid_argument("random_resize_crop: scales must satisfy 0 < min <= max <= 1");
  }
  std::uniform_real_distribution<double> fs(cfg.freq_scale_min, cfg.freq_scale_max);
  std::uniform_real_distribution<double> ts(cfg.time_scale_min, cfg.time_scale_max);
  const auto h = static_cast<int>(spec.rows()), w = static_cast<int>(spec.cols());
  const int rows = std::clamp(static_cast<int>(std::lround(h * fs(rng))), 1, h);
  const int cols = std::clamp(static_cast<int>(std::lround(w * ts(rng))), 1, w);
  const int top = std::uniform_int_distribution<int>(0, h - rows)(rng);
  const int left = std::uniform_int_distribution<int>(0, w - cols)(rng);
  return resize_crop(spec, top, left, rows, cols);
}

std::vector<int> structured_patchout(const ShapeSpec& shape, double ratio, std::uint64_t seed,
                                     bool structured) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("patchout ratio must lie in [0, 1)");
  const int N = shape.num_patches();
  if (!structured) return sample_mask(N, ratio, seed).visible;

  std::mt19937_64 rng(seed);
  std::vector<int> rows(shape.n_freq), cols(shape.n_time);
  std::iota(rows.begin(), rows.end(), 0);
  std::iota(cols.begin(), cols.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng);
  std::shuffle(cols.begin(), cols.end(), rng);
  int drop_r = 0, drop_c = 0;
  const double need = ratio * N;
  auto dropped = [&] { return N - (shape.n_freq - drop_r) * (shape.n_time - drop_c); };
  while (dropped() < need - 1e-9) {
    const bool can_r = drop_r + 1 < shape.n_freq;
    const bool can_c = drop_c + 1 < shape.n_time;
    if (!can_r && !can_c) break;
    const bool take_row = can_r && (!can_c || static_cast<double>(drop_r) / shape.n_freq <=
                                                  static_cast<double>(drop_c) / shape.n_time);
    (take_row ? drop_r : drop_c)++;
  }
  std::vector<bool> row_kept(shape.n_freq, true), col_kept(shape.n_time, true);
  for (int k = 0; k < drop_r; ++k) row_kept[rows[k]] = false;
  for (int k = 0; k < drop_c; ++k) col_kept[cols[k]] = false;
  std::vector<int> kept;
  for (int f = 0; f < shape.n_freq; ++f) {
    for (int t = 0; t < shape.n_time; ++t) {
      if (row_kept[f] && col_kept[t]) kept.push_back(f * shape.n_time + t);
    }
  }
  return kept;
}

FineTuneConfig FineTuneConfig::as20k() {
  FineTuneConfig c;
  c.lr = 1.0;
  c.optimizer = OptimizerKind::sgd;
  c.mixup_alpha = 0.3;
  c.rrc = true;
  c.spo_ratio = 0.5;
  c.metric = MetricKind::mAP;
  return c;
}

FineTuneConfig FineTuneConfig::vc1() {
  FineTuneConfig c;
  c.lr = 0.001;
  c.optimizer = OptimizerKind::adamw;
  c.mixup_alpha = 0.0;
  c.rrc = false;
  c.spo_ratio = 0.0;
  c.metric = MetricKind::top1_accuracy;
  return c;
}

void FineTuneConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("fine-tune lr must be positive");
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("fine-tune epochs and batch_size must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw std::invalid_argument("warmup_epochs must lie in [0, epochs]");
  if (!(spo_ratio >= 0.0 && spo_ratio < 1.0)) throw std::invalid_argument("spo_ratio must lie in [0, 1)");
  if (mixup_alpha < 0.0) throw std::invalid_argument("mixup_alpha must be >= 0");
}

nlohmann::json FineTuneReport::to_json() const {
  return {{"metric", to_string(metric)}, {"value", value}, {"epoch_values", epoch_values}, {"epoch_losses", epoch_losses}};
}

int head_input_dim(const EncoderCheckpoint& encoder, const FineTuneConfig& cfg) {
  return cfg.spo_ratio > 0.0 ? encoder.config.width : encoder.shape.n_freq * encoder.config.width;
}

namespace {

struct FineTuneModel {
  const EncoderCheckpoint& ckpt;
  const FineTuneConfig& cfg;
  Encoder encoder;
  Matrix positions;

  FineTuneModel(const EncoderCheckpoint& c, const FineTuneConfig& f)
      : ckpt(c), cfg(f), encoder(c.encoder()), positions(c.positions()) {}

  bool spo() const { return cfg.spo_ratio > 0.0; }

  // Eval-mode feature of one full-length clip (all windows, every token).
  RowVector feature(const ParamMap& params, const Matrix& spec) const {
    std::vector<Matrix> segments;
    for (const auto& seq : windows(ckpt, spec)) {
      const Matrix z = encode(encoder, params, seq.tokens, positions);
      segments.push_back(spo() ? Matrix(z) : frame_features(z, seq.shape));
    }
    return long_clip_feature(segments);
  }
};

Matrix fit_frames(const Matrix& spec, int frames, std::mt19937_64& rng) {
  if (spec.cols() == frames) return spec;
  return crop_or_pad(spec, frames, rng()).spectrogram;
}

}  // namespace

Matrix fine_tune_scores(const EncoderCheckpoint& encoder, const ParamMap& params,
                        const FineTuneConfig& cfg, std::span<const Matrix> spectrograms) {
  const FineTuneModel model(encoder, cfg);
  const int classes = static_cast<int>(params.at("head.bias").cols());
  Matrix scores(static_cast<Eigen::Index>(spectrograms.size()), classes);
  for (std::size_t i = 0; i < spectrograms.size(); ++i) {
    scores.row(i) = nn::linear_forward(model.feature(params, spectrograms[i]), params.at("head.weight"),
                                       params.at("head.bias"));
  }
  return scores;
}

FineTuneReport fine_tune(const EncoderCheckpoint& encoder, const TaskData& train,
                         const TaskData& test, const FineTuneConfig& cfg,
                         const std::function<void(const nlohmann::json&)>& on_epoch) {
  cfg.validate();
  if (train.size() == 0 || test.size() == 0) throw std::invalid_argument("fine_tune: empty split");
  if (train.targets.cols() < 2) throw std::invalid_argument("fine_tune: at least 2 classes required");
  const FineTuneModel model(encoder, cfg);
  const ShapeSpec& shape = encoder.shape;
  const int classes = static_cast<int>(train.targets.cols());
  const int in_dim = head_input_dim(encoder, cfg);

  std::mt19937_64 rng(cfg.seed);
  ParamMap params = encoder.params;
  params["head.weight"] = Matrix::Zero(in_dim, classes);
  params["head.bias"] = Matrix::Zero(1, classes);
  {
    std::normal_distribution<double> init(0.0, 0.01);
    for (Eigen::Index k = 0; k < params["head.weight"].size(); ++k) params["head.weight"].data()[k] = init(rng);
  }
  AdamW adamw({0.9, 0.999, 1e-8, cfg.weight_decay});
  Sgd sgd({cfg.momentum, cfg.weight_decay});

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::int64_t per_epoch = (static_cast<std::int64_t>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total = per_epoch * cfg.epochs;
  const std::int64_t warmup = per_epoch * cfg.warmup_epochs;
  std::int64_t step = 0;

  FineTuneReport report;
  report.metric = cfg.metric;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Matrix> specs;
      Matrix targets(static_cast<Eigen::Index>(end - start), classes);
      for (std::size_t k = start; k < end; ++k) {
        Matrix s = fit_frames(train.spectrograms[order[k]], shape.width(), rng);
        if (cfg.rrc) s = random_resize_crop(s, cfg.rrc_config, rng);
        specs.push_back(std::move(s));
        targets.row(k - start) = train.targets.row(order[k]);
      }
      const MixupResult mixed = mixup(specs, targets, cfg.mixup_alpha, rng);

      const auto B = static_cast<Eigen::Index>(specs.size());
      std::vector<Encoder::Cache> caches(B);
      std::vector<std::vector<int>> kept(B);
      Matrix features(B, in_dim);
      for (Eigen::Index b = 0; b < B; ++b) {
        const auto seq = partition(InputGrid::from_spectrogram(mixed.inputs[b]), shape.patch_size);
        if (model.spo()) {
          kept[b] = structured_patchout(shape, cfg.spo_ratio, rng(), cfg.spo_structured);
          const Matrix z = model.encoder.forward(params, select(seq.tokens, kept[b]),
                                                  select(model.positions, kept[b]), &caches[b]);
          features.row(b) = z.colwise().mean();
        } else {
          const Matrix z = model.encoder.forward(params, seq.tokens, model.positions, &caches[b]);
          features.row(b) = clip_feature(frame_features(z, shape));
        }
      }
      const Matrix logits = nn::linear_forward(features, params.at("head.weight"), params.at("head.bias"));
      Matrix d_logits;
      const double loss = head_loss(logits, mixed.targets, train.multi_label, &d_logits);
      if (!std::isfinite(loss)) throw std::runtime_error("fine_tune: non-finite loss at step " + std::to_string(step));
      epoch_loss += loss * static_cast<double>(B);

      ParamMap grads = zeros_like(params);
      grads.at("head.weight") = features.transpose() * d_logits;
      grads.at("head.bias") = d_logits.colwise().sum();
      const Matrix d_features = d_logits * params.at("head.weight").transpose();
      for (Eigen::Index b = 0; b < B; ++b) {
        Matrix dz;
        if (model.spo()) {
          dz = d_features.row(b).replicate(static_cast<Eigen::Index>(kept[b].size()), 1) /
               static_cast<double>(kept[b].size());
        } else {
          dz = clip_feature_backward(d_features.row(b), shape);
        }
        model.encoder.backward(params, caches[b], dz, grads);
      }
      const double lr = warmup_cosine_lr(cfg.lr, 0.0, step++, warmup, total);
      if (cfg.optimizer == OptimizerKind::sgd) {
        sgd.step(params, grads, lr);
      } else {
        adamw.step(params, grads, lr);
      }
    }
    const double value = evaluate_metric(cfg.metric, fine_tune_scores(encoder, params, cfg, test.spectrograms),
                                         test.targets);
    report.epoch_values.push_back(value);
    report.epoch_losses.push_back(epoch_loss / static_cast<double>(train.size()));
    if (on_epoch) {
      on_epoch({{"epoch", epoch}, {"loss", report.epoch_losses.back()}, {to_string(cfg.metric), value}});
    }
  }
  report.value = report.epoch_values.back();
  report.params = std::move(params);
  return report;
}

}  // namespace m2d
