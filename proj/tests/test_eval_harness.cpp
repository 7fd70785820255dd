#include "m2d/eval_harness.hpp"

#include "m2d/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

using namespace m2d;

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
  return m;
}

Matrix one_hot(const std::vector<int>& labels, int classes) {
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) y(i, labels[i]) = 1.0;
  return y;
}

// Brute force: for each positive, precision among items scoring at least as
// high; averaged over positives.
double oracle_ap(const std::vector<double>& s, const std::vector<double>& y) {
  double total = 0.0, positives = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] < 0.5) continue;
    positives += 1.0;
    double above = 0.0, hits = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] >= s[i]) {
        above += 1.0;
        hits += y[j] > 0.5;
      }
    }
    total += hits / above;
  }
  return total / positives;
}

// Two frequency halves; the class decides which half carries energy.
TaskData band_task(int clips, std::uint64_t seed, int rows = 16, int frames = 32) {
  TaskData t;
  t.class_names = {"low", "high"};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.5);
  std::vector<int> labels;
  for (int i = 0; i < clips; ++i) {
    const int c = i % 2;
    Matrix s(rows, frames);
    for (Eigen::Index k = 0; k < s.size(); ++k) s.data()[k] = noise(rng);
    s.middleRows(c * rows / 2, rows / 2).array() += 1.0;
    t.spectrograms.push_back(s);
    labels.push_back(c);
  }
  t.targets = one_hot(labels, 2);
  return t;
}

}  // namespace

TEST_CASE("average precision: hand-enumerated ranked list") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  const std::vector<double> y{1, 0, 1, 0};
  CHECK(average_precision(s, y) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  const std::vector<double> perfect{1, 1, 0, 0};
  CHECK(average_precision(s, perfect) == 1.0);
  const std::vector<double> none{0, 0, 0, 0};
  CHECK_THROWS_AS(average_precision(s, none), std::invalid_argument);
}

TEST_CASE("mAP and accuracy match brute force on 3-class toy cases") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 3 + static_cast<int>(rng() % 10);
    Matrix scores(n, 3), targets(n, 3);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) {
        scores(i, c) = static_cast<double>(rng() % 5);  // many ties
        targets(i, c) = static_cast<double>(rng() % 2);
      }
    }
    for (int c = 0; c < 3; ++c) targets(static_cast<int>(rng() % n), c) = 1.0;
    double expected = 0.0;
    for (int c = 0; c < 3; ++c) {
      std::vector<double> s(n), y(n);
      for (int i = 0; i < n; ++i) {
        s[i] = scores(i, c);
        y[i] = targets(i, c);
      }
      expected += oracle_ap(s, y) / 3.0;
    }
    REQUIRE(std::abs(mean_average_precision(scores, targets) - expected) < 1e-6);
  }

  Matrix scores(4, 3);
  scores << 0.1, 0.7, 0.2,  //
      0.5, 0.3, 0.2,        //
      0.2, 0.2, 0.6,        //
      0.6, 0.3, 0.1;
  const Matrix y = one_hot({1, 0, 2, 1}, 3);
  CHECK(top1_accuracy(scores, y) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(top1_accuracy(scores.topRows(1), y.topRows(1)) == 1.0);
  CHECK(top1_accuracy(scores.bottomRows(1), y.bottomRows(1)) == 0.0);
  CHECK(mean_average_precision(y, y) == 1.0);
  CHECK(evaluate_metric(MetricKind::top1_accuracy, scores, y) == top1_accuracy(scores, y));
  CHECK(metric_from_string(to_string(MetricKind::mAP)) == MetricKind::mAP);
}

TEST_CASE("linear probe: separable classes") {
  Matrix x = random_matrix(400, 8, 2);
  std::vector<int> labels(400);
  for (int i = 0; i < 400; ++i) {
    labels[i] = i % 2;
    x(i, 3) += labels[i] ? 3.0 : -3.0;
  }
  const Matrix y = one_hot(labels, 2);
  ProbeConfig cfg;
  cfg.epochs = 30;
  const auto r = linear_probe(x.topRows(300), y.topRows(300), x.bottomRows(100), y.bottomRows(100), cfg);
  CHECK(r.value >= 0.99);
  CHECK(r.train_value >= 0.99);
  CHECK(r.metric == MetricKind::top1_accuracy);
  CHECK(linear_probe(x.topRows(300), y.topRows(300), x.bottomRows(100), y.bottomRows(100), cfg).value == r.value);
}

TEST_CASE("linear probe: shuffled labels give chance accuracy") {
  const Matrix x = random_matrix(2600, 8, 3);
  std::mt19937_64 rng(4);
  std::vector<int> labels(2600);
  for (auto& l : labels) l = static_cast<int>(rng() % 2);
  const Matrix y = one_hot(labels, 2);
  ProbeConfig cfg;
  cfg.epochs = 5;
  const auto r = linear_probe(x.topRows(600), y.topRows(600), x.bottomRows(2000), y.bottomRows(2000), cfg);
  CHECK(std::abs(r.value - 0.5) <= 0.05);
}

TEST_CASE("linear probe: multi-label reports mAP, rejects bad input") {
  Matrix x = random_matrix(300, 6, 5);
  Matrix y = Matrix::Zero(300, 3);
  std::mt19937_64 rng(6);
  for (int i = 0; i < 300; ++i) {
    for (int c = 0; c < 3; ++c) {
      if (rng() % 2) {
        y(i, c) = 1.0;
        x(i, c) += 2.5;
      }
    }
  }
  ProbeConfig cfg;
  cfg.metric = MetricKind::mAP;
  cfg.epochs = 30;
  const auto r = linear_probe(x.topRows(200), y.topRows(200), x.bottomRows(100), y.bottomRows(100), cfg, true);
  CHECK(r.value > 0.9);
  CHECK_THROWS_AS(linear_probe(x.topRows(200), y.topRows(200).leftCols(1), x.bottomRows(100),
                               y.bottomRows(100).leftCols(1), cfg), std::invalid_argument);
  CHECK_THROWS_AS(linear_probe(x.topRows(200), y.topRows(100), x.bottomRows(100), y.bottomRows(100), cfg),
                  std::invalid_argument);
}

TEST_CASE("probe leaves the encoder untouched") {
  const ShapeSpec shape{8, 1, 2, 4};
  const auto enc = random_encoder(shape, EncoderConfig{1, 2, 8, 2.0}, 7);
  const ParamMap before = enc.params;
  const TaskData task = band_task(24, 8);
  ProbeConfig cfg;
  cfg.epochs = 5;
  probe_encoder(enc, task.subset(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15}),
                task.subset(std::vector<std::size_t>{16, 17, 18, 19, 20, 21, 22, 23}), cfg);
  for (const auto& [k, v] : before) CHECK(enc.params.at(k) == v);
}

TEST_CASE("extract_features: long clips average their windows") {
  const ShapeSpec shape{8, 1, 2, 4};
  const auto enc = random_encoder(shape, EncoderConfig{1, 2, 8, 2.0}, 9);
  const Matrix a = random_matrix(16, 32, 10);
  const Matrix b = random_matrix(16, 32, 11);
  Matrix ab(16, 64);
  ab << a, b;
  const std::vector<Matrix> specs{a, b, ab};
  const Matrix f = extract_features(enc, specs);
  CHECK(f.cols() == 16);
  CHECK((f.row(2) - (f.row(0) + f.row(1)) / 2.0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(extract_features(enc, std::vector<Matrix>{Matrix::Zero(8, 32)}), std::invalid_argument);
}

TEST_CASE("train_test_split") {
  const auto [train, test] = train_test_split(50, 0.2, 3);
  CHECK(test.size() == 10);
  CHECK(train.size() == 40);
  std::set<std::size_t> all(train.begin(), train.end());
  all.insert(test.begin(), test.end());
  CHECK(all.size() == 50);
  CHECK(train_test_split(50, 0.2, 3) == train_test_split(50, 0.2, 3));
}

TEST_CASE("mixup") {
  const Matrix a = random_matrix(4, 6, 1), b = random_matrix(4, 6, 2);
  CHECK(mix_pair(a, b, 1.0) == a);
  CHECK(mix_pair(a, a, 0.5) == a);

  std::mt19937_64 rng(3);
  const std::vector<Matrix> batch{a, b, random_matrix(4, 6, 3)};
  const Matrix y = one_hot({0, 1, 2}, 3);
  const auto off = mixup(batch, y, 0.0, rng);
  CHECK(off.lambda == 1.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(off.inputs[i] == batch[i]);
  CHECK(off.targets == y);

  for (int trial = 0; trial < 20; ++trial) {
    const auto m = mixup(batch, y, 0.3, rng);
    CHECK(m.lambda >= 0.0);
    CHECK(m.lambda <= 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(m.targets.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK((m.inputs[i] - mix_pair(batch[i], batch[m.partner[i]], m.lambda)).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  double mean = 0.0;
  for (int k = 0; k < 20000; ++k) mean += sample_mixup_lambda(0.3, rng) / 20000.0;
  CHECK(std::abs(mean - 0.5) < 0.02);
}

TEST_CASE("resize and random resize crop") {
  Matrix s(2, 2);
  s << 0, 2, 4, 6;
  const Matrix up = resize_bilinear(s, 3, 3);
  CHECK(up(1, 1) == 3.0);
  CHECK(up(0, 1) == 1.0);
  CHECK(up(2, 2) == 6.0);

  const Matrix spec = random_matrix(80, 608, 4);
  CHECK(resize_crop(spec, 0, 0, 80, 608) == spec);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix out = random_resize_crop(spec, RrcConfig{}, rng);
    CHECK(out.rows() == 80);
    CHECK(out.cols() == 608);
    CHECK(out.maxCoeff() <= spec.maxCoeff());
    CHECK(out.minCoeff() >= spec.minCoeff());
  }
  RrcConfig full{1.0, 1.0, 1.0, 1.0};
  CHECK(random_resize_crop(spec, full, rng) == spec);
  RrcConfig bad{0.5, 1.2, 0.5, 1.0};
  CHECK_THROWS_AS(random_resize_crop(spec, bad, rng), std::invalid_argument);
}

TEST_CASE("structured patchout") {
  const ShapeSpec shape{16, 1, 5, 38};
  CHECK(structured_patchout(shape, 0.0, 1).size() == 190);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto kept = structured_patchout(shape, 0.5, seed);
    CHECK(190 - static_cast<int>(kept.size()) >= 95);
    std::set<int> rows, cols;
    for (int i : kept) {
      rows.insert(i / 38);
      cols.insert(i % 38);
    }
    CHECK(kept.size() == rows.size() * cols.size());
    CHECK(std::is_sorted(kept.begin(), kept.end()));
  }
  CHECK(structured_patchout(shape, 0.5, 3) == structured_patchout(shape, 0.5, 3));
  CHECK(structured_patchout(shape, 0.5, 3, false).size() == 95);
  CHECK(structured_patchout(shape, 0.99, 3).size() == 1);
  CHECK_THROWS_AS(structured_patchout(shape, 1.0, 3), std::invalid_argument);
}

TEST_CASE("fine-tune presets") {
  const auto as = FineTuneConfig::as20k();
  CHECK(as.lr == 1.0);
  CHECK(as.optimizer == OptimizerKind::sgd);
  CHECK(as.mixup_alpha == 0.3);
  CHECK(as.rrc);
  CHECK(as.spo_ratio == 0.5);
  CHECK(as.epochs == 200);
  CHECK(as.warmup_epochs == 5);
  const auto vc = FineTuneConfig::vc1();
  CHECK(vc.lr == 0.001);
  CHECK(vc.optimizer == OptimizerKind::adamw);
  CHECK(vc.mixup_alpha == 0.0);
  CHECK(!vc.rrc);
  CHECK(vc.spo_ratio == 0.0);
}

TEST_CASE("fine-tune: without patchout the classifier reads z''") {
  const ShapeSpec shape{8, 1, 2, 4};
  const auto enc = random_encoder(shape, EncoderConfig{1, 2, 8, 2.0}, 12);
  FineTuneConfig cfg = FineTuneConfig::vc1();
  CHECK(head_input_dim(enc, cfg) == 16);
  ParamMap params = enc.params;
  params["head.weight"] = random_matrix(16, 2, 13);
  params["head.bias"] = random_matrix(1, 2, 14);
  const TaskData task = band_task(6, 15);
  const Matrix scores = fine_tune_scores(enc, params, cfg, task.spectrograms);
  const Matrix features = extract_features(enc, task.spectrograms);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    CHECK(scores.row(i) ==
          nn::linear_forward(features.row(i), params.at("head.weight"), params.at("head.bias")));
  }
  cfg.spo_ratio = 0.5;
  CHECK(head_input_dim(enc, cfg) == 8);
}

TEST_CASE("fine-tune: a short run matches or beats the frozen probe") {
  const ShapeSpec shape{8, 1, 2, 4};
  const auto enc = random_encoder(shape, EncoderConfig{1, 2, 16, 2.0}, 16);
  const TaskData all = band_task(64, 17);
  const auto [tr, te] = train_test_split(all.size(), 0.25, 18);
  const TaskData train = all.subset(tr), test = all.subset(te);

  ProbeConfig pcfg;
  pcfg.epochs = 5;
  const auto probe = probe_encoder(enc, train, test, pcfg);

  FineTuneConfig cfg = FineTuneConfig::vc1();
  cfg.epochs = 5;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 8;
  cfg.lr = 3e-3;
  int epochs_seen = 0;
  const auto ft = fine_tune(enc, train, test, cfg, [&](const nlohmann::json& j) {
    CHECK(j.contains("loss"));
    ++epochs_seen;
  });
  CHECK(epochs_seen == 5);
  CHECK(ft.epoch_values.size() == 5);
  CHECK(ft.value >= probe.value);
  CHECK(ft.params.count("head.weight") == 1);
  bool changed = false;
  for (const auto& [k, v] : enc.params) changed = changed || ft.params.at(k) != v;
  CHECK(changed);
}

TEST_CASE("fine-tune: augmentations and patchout path run, multi-label mAP") {
  const ShapeSpec shape{8, 1, 2, 4};
  const auto enc = random_encoder(shape, EncoderConfig{1, 2, 8, 2.0}, 19);
  TaskData task = band_task(16, 20);
  task.multi_label = true;
  FineTuneConfig cfg = FineTuneConfig::as20k();
  cfg.lr = 0.05;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 4;
  const auto [tr, te] = train_test_split(task.size(), 0.25, 1);
  const auto r = fine_tune(enc, task.subset(tr), task.subset(te), cfg);
  CHECK(r.metric == MetricKind::mAP);
  CHECK(std::isfinite(r.value));
  CHECK(r.params.at("head.weight").rows() == 8);
}
