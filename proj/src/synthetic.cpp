#include "m2d/synthetic.hpp"

#include "fftw_lock.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <stdexcept>

namespace m2d {

std::vector<SyntheticClass> synthetic_classes(int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("synthetic corpus needs at least one class");
  const double lo = hz_to_mel(150.0), hi = hz_to_mel(6500.0);
  const double step = (hi - lo) / num_classes;
  std::vector<SyntheticClass> classes;
  for (int c = 0; c < num_classes; ++c) {
    const double center = lo + (c + 0.5) * step;
    SyntheticClass k;
    k.name = "class" + std::to_string(c);
    k.band_lo = mel_to_hz(center - 0.2 * step);
    k.band_hi = mel_to_hz(center + 0.2 * step);
    k.tone_hz = mel_to_hz(center + 0.1 * step);
    classes.push_back(k);
  }
  return classes;
}

std::vector<double> band_noise(std::int64_t samples, int sample_rate, double lo, double hi,
                               std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("band_noise: samples must be >= 1");
  const std::int64_t bins = samples / 2 + 1;
  fftw_complex* spec = fftw_alloc_complex(bins);
  std::vector<double> out(samples);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  for (std::int64_t k = 0; k < bins; ++k) {
    const double f = static_cast<double>(k) * sample_rate / samples;
    const bool pass = f >= lo && f <= hi && k > 0;
    spec[k][0] = pass ? normal(rng) : 0.0;
    spec[k][1] = pass ? normal(rng) : 0.0;
  }
  fftw_plan plan;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    plan = fftw_plan_dft_c2r_1d(static_cast<int>(samples), spec, out.data(), FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(spec);
  double ss = 0.0;
  for (double v : out) ss += v * v;
  const double rms = std::sqrt(ss / samples);
  if (rms > 0.0) {
    for (double& v : out) v /= rms;
  }
  return out;
}

SyntheticClip synthesize_clip(const std::vector<SyntheticClass>& classes,
                              const std::vector<int>& labels, const SyntheticCorpusConfig& cfg,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::int64_t n = cfg.samples;
  SyntheticClip clip;
  clip.labels = labels;
  std::sort(clip.labels.begin(), clip.labels.end());
  clip.waveform.assign(n, 0.0);

  for (int c : clip.labels) {
    const auto& k = classes.at(c);
    const double gain = cfg.class_gain_min + (1.0 - cfg.class_gain_min) * unit(rng);
    // Active over a random span covering at least half the clip.
    const auto span = static_cast<std::int64_t>(n * (0.5 + 0.5 * unit(rng)));
    const auto onset = static_cast<std::int64_t>((n - span) * unit(rng));
    const auto noise = band_noise(n, cfg.sample_rate, k.band_lo, k.band_hi, rng());
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    for (std::int64_t i = onset; i < onset + span; ++i) {
      const double tone = std::sin(2.0 * std::numbers::pi * k.tone_hz * i / cfg.sample_rate + phase);
      clip.waveform[i] += gain * (0.1 * noise[i] + 0.1 * tone);
    }
  }

  // Distractor band anywhere in [100, 7000] Hz, present in every clip.
  const double center = mel_to_hz(hz_to_mel(100.0) + (hz_to_mel(7000.0) - hz_to_mel(100.0)) * unit(rng));
  const auto distractor = band_noise(n, cfg.sample_rate, center * 0.85, center * 1.15, rng());
  const double dgain = cfg.distractor_gain * unit(rng);
  std::normal_distribution<double> normal;
  for (std::int64_t i = 0; i < n; ++i) {
    clip.waveform[i] += 0.1 * dgain * distractor[i] + cfg.background_gain * normal(rng);
  }

  const double peak = std::abs(*std::max_element(clip.waveform.begin(), clip.waveform.end(),
                                                 [](double a, double b) { return std::abs(a) < std::abs(b); }));
  if (peak > 0.95) {
    for (double& v : clip.waveform) v *= 0.95 / peak;
  }
  return clip;
}

std::vector<SyntheticClip> synthetic_corpus(const SyntheticCorpusConfig& cfg) {
  if (cfg.clips_per_class < 1) throw std::invalid_argument("synthetic corpus needs clips_per_class >= 1");
  const auto classes = synthetic_classes(cfg.num_classes);
  const int total = cfg.num_classes * cfg.clips_per_class;
  std::mt19937_64 rng(cfg.seed);
  std::vector<SyntheticClip> clips;
  clips.reserve(total);
  for (int i = 0; i < total; ++i) {
    std::vector<int> labels;
    if (cfg.multi_label) {
      std::bernoulli_distribution on(cfg.label_probability);
      for (int c = 0; c < cfg.num_classes; ++c) {
        if (on(rng)) labels.push_back(c);
      }
      if (labels.empty()) labels.push_back(static_cast<int>(rng() % cfg.num_classes));
    } else {
      labels.push_back(i % cfg.num_classes);
    }
    clips.push_back(synthesize_clip(classes, labels, cfg, rng()));
  }
  return clips;
}

std::filesystem::path write_synthetic_corpus(const std::filesystem::path& dir,
                                             const SyntheticCorpusConfig& cfg) {
  std::filesystem::create_directories(dir);
  const auto classes = synthetic_classes(cfg.num_classes);
  const auto clips = synthetic_corpus(cfg);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%05zu.wav", i);
    write_wav(dir / name, {clips[i].waveform, cfg.sample_rate});
    ManifestEntry e{dir / name, {}};
    for (int c : clips[i].labels) e.labels.push_back(classes[c].name);
    entries.push_back(std::move(e));
  }
  const auto manifest = dir / "manifest.txt";
  write_manifest(manifest, entries);
  return manifest;
}

}  // namespace m2d
