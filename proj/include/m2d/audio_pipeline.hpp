#pragma once

// Waveform to normalized log-mel spectrogram, dataset statistics, clip length
// policy, WAV and manifest I/O, and a spectrogram cache.
//
// Framing: no center padding. A waveform of S samples yields
//   T = 1 + floor((S - window) / hop)
// frames (S >= window). Frame t covers samples [t*hop, t*hop + window).
// Spectrograms are n_mels x T matrices, frequency along rows.

#include "m2d/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace m2d {

struct MelConfig {
  int sample_rate = 16000;
  int window = 400;  // 25 ms
  int hop = 160;     // 10 ms
  int n_fft = 400;
  int n_mels = 80;
  double f_min = 50.0;
  double f_max = 8000.0;
  double log_floor = 1e-10;  // added to mel power before the log

  void validate() const;
  nlohmann::json to_json() const;
  static MelConfig from_json(const nlohmann::json& j);
};

/// Frames produced for `samples` input samples; 0 when shorter than a window.
std::int64_t frame_count(std::int64_t samples, const MelConfig& cfg);
/// Fewest samples that produce `frames` frames.
std::int64_t samples_for_frames(std::int64_t frames, const MelConfig& cfg);

/// Slaney mel scale (linear below 1 kHz, logarithmic above).
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// n_mels x (n_fft/2 + 1) triangular filters, Slaney area normalization.
Matrix mel_filterbank(const MelConfig& cfg);

/// Reusable front end. Holds the filter bank and an FFTW plan.
class LogMel {
 public:
  explicit LogMel(MelConfig cfg = {});
  ~LogMel();
  LogMel(const LogMel&) = delete;
  LogMel& operator=(const LogMel&) = delete;

  const MelConfig& config() const { return cfg_; }
  const Matrix& filterbank() const { return filters_; }

  /// Power spectrogram, (n_fft/2 + 1) x T. Throws on empty or too-short input.
  Matrix power_spectrogram(std::span<const double> waveform) const;
  /// log(mel power + floor), n_mels x T.
  Matrix operator()(std::span<const double> waveform) const;

 private:
  struct Plan;
  MelConfig cfg_;
  Matrix filters_;
  std::vector<double> hann_;
  std::unique_ptr<Plan> plan_;
};

Matrix logmel(std::span<const double> waveform, const MelConfig& cfg = {});

struct DatasetStats {
  double mean = 0.0;
  double std = 1.0;

  nlohmann::json to_json() const { return {{"mean", mean}, {"std", std}}; }
  static DatasetStats from_json(const nlohmann::json& j);
};

inline constexpr double kStatsStdFloor = 1e-8;

/// Scalar mean and population std over every value of every spectrogram.
/// Std is floored at 1e-8.
DatasetStats compute_stats(std::span<const Matrix> corpus);

Matrix normalize(const Matrix& spec, const DatasetStats& stats);
Matrix denormalize(const Matrix& spec, const DatasetStats& stats);

struct Clip {
  Matrix spectrogram;
  std::string source_id;
  int crop_offset = 0;  // first source frame
};

/// Longer inputs: uniform random window of `target_frames`. Shorter inputs:
/// zero frames appended at the end. Equal length: unchanged, offset 0.
Clip crop_or_pad(const Matrix& spec, int target_frames, std::uint64_t seed,
                 const std::string& source_id = {});

/// Consecutive non-overlapping windows; the last one is zero padded.
std::vector<Clip> split_long(const Matrix& spec, int model_frames,
                             const std::string& source_id = {});

struct Waveform {
  std::vector<double> samples;  // in [-1, 1)
  int sample_rate = 0;
};

/// PCM WAV, 16/24/32-bit, mono, 16 kHz. Anything else is rejected with a
/// message naming the file.
Waveform read_wav(const std::filesystem::path& path, int required_rate = 16000);
/// 16-bit PCM mono.
void write_wav(const std::filesystem::path& path, const Waveform& wave);

/// Manifest: one clip per line, `<path> <label>[,<label>...]`, whitespace
/// separated. Relative paths resolve against the manifest's directory.
/// Blank lines and lines starting with '#' are ignored.
struct ManifestEntry {
  std::filesystem::path path;
  std::vector<std::string> labels;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries);

inline constexpr int kSpectrogramCacheVersion = 1;

/// Log-mel of a WAV file, memoized under `cache_dir` (an empty path disables
/// the cache). Entries are keyed by file path, size, mtime and mel config
/// and carry a version header; stale or foreign entries are recomputed.
Matrix cached_logmel(const std::filesystem::path& wav, const MelConfig& cfg,
                     const std::filesystem::path& cache_dir);

}  // namespace m2d
