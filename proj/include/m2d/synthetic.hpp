#pragma once

// Synthetic band-classification corpus: each class owns a frequency band
// (band-limited noise) and a tone inside it. Clips mix the active classes with
// a distractor band and background noise at random gains and onsets.

#include "m2d/audio_pipeline.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace m2d {

struct SyntheticClass {
  std::string name;
  double band_lo = 0.0;  // Hz
  double band_hi = 0.0;
  double tone_hz = 0.0;
};

struct SyntheticCorpusConfig {
  int num_classes = 6;
  int clips_per_class = 16;
  std::int64_t samples = 33520;  // 208 frames at the default framing
  int sample_rate = 16000;
  bool multi_label = false;
  double label_probability = 0.35;  // per class, multi-label only
  double class_gain_min = 0.05;
  double distractor_gain = 0.5;
  double background_gain = 0.02;
  std::uint64_t seed = 0;
};

/// Classes spaced evenly on the mel scale between 150 Hz and 6.5 kHz.
std::vector<SyntheticClass> synthetic_classes(int num_classes);

struct SyntheticClip {
  std::vector<double> waveform;
  std::vector<int> labels;  // class indices, sorted
};

/// Gaussian noise restricted to [lo, hi] Hz, unit RMS.
std::vector<double> band_noise(std::int64_t samples, int sample_rate, double lo, double hi,
                               std::uint64_t seed);

SyntheticClip synthesize_clip(const std::vector<SyntheticClass>& classes,
                              const std::vector<int>& labels, const SyntheticCorpusConfig& cfg,
                              std::uint64_t seed);

/// num_classes * clips_per_class clips. Single-label corpora are class-balanced
/// and interleaved (clip i has class i % num_classes).
std::vector<SyntheticClip> synthetic_corpus(const SyntheticCorpusConfig& cfg);

/// Writes clip_XXXXX.wav files plus manifest.txt into `dir`; returns the
/// manifest path.
std::filesystem::path write_synthetic_corpus(const std::filesystem::path& dir,
                                             const SyntheticCorpusConfig& cfg);

}  // namespace m2d
