#include "m2d/audio_pipeline.hpp"

#include "m2d/archive.hpp"

#include "fftw_lock.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace m2d {

std::mutex& detail::fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

using detail::fftw_planner_mutex;

void MelConfig::validate() const {
  if (sample_rate < 1 || window < 1 || hop < 1 || n_fft < window) {
    throw std::invalid_argument("mel config requires positive rate/window/hop and n_fft >= window");
  }
  if (n_mels < 1) throw std::invalid_argument("mel config requires n_mels >= 1");
  if (!(0.0 <= f_min && f_min < f_max && f_max <= sample_rate / 2.0)) {
    throw std::invalid_argument("mel config requires 0 <= f_min < f_max <= sample_rate / 2");
  }
  if (!(log_floor > 0.0)) throw std::invalid_argument("mel config requires a positive log floor");
}

nlohmann::json MelConfig::to_json() const {
  return {{"sample_rate", sample_rate}, {"window", window}, {"hop", hop},
          {"n_fft", n_fft},             {"n_mels", n_mels}, {"f_min", f_min},
          {"f_max", f_max},             {"log_floor", log_floor}};
}

MelConfig MelConfig::from_json(const nlohmann::json& j) {
  MelConfig c;
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.window = j.value("window", c.window);
  c.hop = j.value("hop", c.hop);
  c.n_fft = j.value("n_fft", c.n_fft);
  c.n_mels = j.value("n_mels", c.n_mels);
  c.f_min = j.value("f_min", c.f_min);
  c.f_max = j.value("f_max", c.f_max);
  c.log_floor = j.value("log_floor", c.log_floor);
  return c;
}

std::int64_t frame_count(std::int64_t samples, const MelConfig& cfg) {
  if (samples < cfg.window) return 0;
  return 1 + (samples - cfg.window) / cfg.hop;
}

std::int64_t samples_for_frames(std::int64_t frames, const MelConfig& cfg) {
  if (frames < 1) return 0;
  return cfg.window + (frames - 1) * cfg.hop;
}

namespace {
constexpr double kMinLogHz = 1000.0;
constexpr double kLinearStep = 200.0 / 3.0;
constexpr double kMinLogMel = kMinLogHz / kLinearStep;
const double kLogStep = std::log(6.4) / 27.0;
}  // namespace

double hz_to_mel(double hz) {
  if (hz < kMinLogHz) return hz / kLinearStep;
  return kMinLogMel + std::log(hz / kMinLogHz) / kLogStep;
}

double mel_to_hz(double mel) {
  if (mel < kMinLogMel) return mel * kLinearStep;
  return kMinLogHz * std::exp(kLogStep * (mel - kMinLogMel));
}

Matrix mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const int bins = cfg.n_fft / 2 + 1;
  std::vector<double> edges(cfg.n_mels + 2);
  const double lo = hz_to_mel(cfg.f_min), hi = hz_to_mel(cfg.f_max);
  for (int i = 0; i < cfg.n_mels + 2; ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * i / (cfg.n_mels + 1));
  }
  Matrix fb = Matrix::Zero(cfg.n_mels, bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    const double area_norm = 2.0 / (right - left);
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      const double up = (f - left) / (center - left);
      const double down = (right - f) / (right - center);
      fb(m, k) = area_norm * std::max(0.0, std::min(up, down));
    }
  }
  return fb;
}

struct LogMel::Plan {
  fftw_plan plan = nullptr;
  int n = 0;
  ~Plan() {
    if (plan) {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan);
    }
  }
};

LogMel::LogMel(MelConfig cfg) : cfg_(cfg), filters_(mel_filterbank(cfg)), plan_(new Plan) {
  hann_.resize(cfg_.window);
  for (int n = 0; n < cfg_.window; ++n) {
    hann_[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / cfg_.window);
  }
  plan_->n = cfg_.n_fft;
  double* in = fftw_alloc_real(cfg_.n_fft);
  fftw_complex* out = fftw_alloc_complex(cfg_.n_fft / 2 + 1);
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan_->plan = fftw_plan_dft_r2c_1d(cfg_.n_fft, in, out, FFTW_ESTIMATE);
  }
  fftw_free(in);
  fftw_free(out);
  if (!plan_->plan) throw std::runtime_error("FFTW could not create a plan");
}

LogMel::~LogMel() = default;

Matrix LogMel::power_spectrogram(std::span<const double> waveform) const {
  if (waveform.empty()) throw std::invalid_argument("logmel: empty waveform");
  const std::int64_t frames = frame_count(static_cast<std::int64_t>(waveform.size()), cfg_);
  if (frames < 1) {
    throw std::invalid_argument("logmel: waveform of " + std::to_string(waveform.size()) +
                                " samples is shorter than one window (" +
                                std::to_string(cfg_.window) + ")");
  }
  const int bins = cfg_.n_fft / 2 + 1;
  Matrix power(bins, frames);
  double* in = fftw_alloc_real(cfg_.n_fft);
  fftw_complex* out = fftw_alloc_complex(bins);
  for (std::int64_t t = 0; t < frames; ++t) {
    const double* src = waveform.data() + t * cfg_.hop;
    for (int n = 0; n < cfg_.n_fft; ++n) in[n] = n < cfg_.window ? src[n] * hann_[n] : 0.0;
    fftw_execute_dft_r2c(plan_->plan, in, out);
    for (int k = 0; k < bins; ++k) power(k, t) = out[k][0] * out[k][0] + out[k][1] * out[k][1];
  }
  fftw_free(in);
  fftw_free(out);
  return power;
}

Matrix LogMel::operator()(std::span<const double> waveform) const {
  const Matrix mel = filters_ * power_spectrogram(waveform);
  const double floor = cfg_.log_floor;
  return mel.unaryExpr([floor](double v) { return std::log(v + floor); });
}

Matrix logmel(std::span<const double> waveform, const MelConfig& cfg) {
  return LogMel(cfg)(waveform);
}

DatasetStats DatasetStats::from_json(const nlohmann::json& j) {
  DatasetStats s{j.at("mean").get<double>(), j.at("std").get<double>()};
  if (!(s.std > 0.0)) throw std::invalid_argument("dataset stats require std > 0");
  return s;
}

DatasetStats compute_stats(std::span<const Matrix> corpus) {
  if (corpus.empty()) throw std::invalid_argument("compute_stats: empty corpus");
  long double n = 0, sum = 0;
  for (const auto& spec : corpus) {
    n += spec.size();
    for (Eigen::Index k = 0; k < spec.size(); ++k) sum += spec.data()[k];
  }
  if (n == 0) throw std::invalid_argument("compute_stats: corpus has no values");
  const long double mean = sum / n;
  long double ss = 0;
  for (const auto& spec : corpus) {
    for (Eigen::Index k = 0; k < spec.size(); ++k) {
      const long double d = spec.data()[k] - mean;
      ss += d * d;
    }
  }
  DatasetStats stats;
  stats.mean = static_cast<double>(mean);
  stats.std = std::max(static_cast<double>(std::sqrt(ss / n)), kStatsStdFloor);
  return stats;
}

Matrix normalize(const Matrix& spec, const DatasetStats& stats) {
  return ((spec.array() - stats.mean) / stats.std).matrix();
}

Matrix denormalize(const Matrix& spec, const DatasetStats& stats) {
  return (spec.array() * stats.std + stats.mean).matrix();
}

Clip crop_or_pad(const Matrix& spec, int target_frames, std::uint64_t seed,
                 const std::string& source_id) {
  if (target_frames < 1) throw std::invalid_argument("crop_or_pad: target_frames must be >= 1");
  Clip clip;
  clip.source_id = source_id;
  const auto frames = static_cast<int>(spec.cols());
  if (frames > target_frames) {
    std::mt19937_64 rng(seed);
    clip.crop_offset = std::uniform_int_distribution<int>(0, frames - target_frames)(rng);
    clip.spectrogram = spec.middleCols(clip.crop_offset, target_frames);
  } else {
    clip.spectrogram = Matrix::Zero(spec.rows(), target_frames);
    clip.spectrogram.leftCols(frames) = spec;
  }
  return clip;
}

std::vector<Clip> split_long(const Matrix& spec, int model_frames, const std::string& source_id) {
  if (model_frames < 1) throw std::invalid_argument("split_long: model_frames must be >= 1");
  if (spec.cols() < 1) throw std::invalid_argument("split_long: empty spectrogram");
  std::vector<Clip> clips;
  for (int start = 0; start < spec.cols(); start += model_frames) {
    const int take = std::min<int>(model_frames, static_cast<int>(spec.cols()) - start);
    Clip c;
    c.source_id = source_id;
    c.crop_offset = start;
    c.spectrogram = Matrix::Zero(spec.rows(), model_frames);
    c.spectrogram.leftCols(take) = spec.middleCols(start, take);
    clips.push_back(std::move(c));
  }
  return clips;
}

namespace {

std::uint32_t le32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t le16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

void put32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}
void put16(std::ostream& out, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path, int required_rate) {
  auto fail = [&](const std::string& why) {
    return std::runtime_error("wav " + path.string() + ": " + why);
  };
  std::ifstream in(path, std::ios::binary);
  if (!in) throw fail("cannot open");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw fail("not a RIFF/WAVE file");
  }
  int format = 0, channels = 0, rate = 0, bits = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  for (std::size_t pos = 12; pos + 8 <= bytes.size();) {
    const std::uint32_t size = le32(&bytes[pos + 4]);
    const unsigned char* body = &bytes[pos + 8];
    const std::size_t avail = std::min<std::size_t>(size, bytes.size() - pos - 8);
    if (std::memcmp(&bytes[pos], "fmt ", 4) == 0) {
      if (avail < 16) throw fail("truncated fmt chunk");
      format = le16(body);
      channels = le16(body + 2);
      rate = static_cast<int>(le32(body + 4));
      bits = le16(body + 14);
      if (format == 0xFFFE && avail >= 26) format = le16(body + 24);
    } else if (std::memcmp(&bytes[pos], "data", 4) == 0) {
      data = body;
      data_size = avail;
    }
    pos += 8 + size + (size & 1);
  }
  if (!format) throw fail("missing fmt chunk");
  if (!data) throw fail("missing data chunk");
  if (format != 1) throw fail("only PCM is supported (format tag " + std::to_string(format) + ")");
  if (channels != 1) throw fail("expected mono, got " + std::to_string(channels) + " channels");
  if (bits != 16 && bits != 24 && bits != 32) {
    throw fail("unsupported sample width " + std::to_string(bits) + " bits");
  }
  if (required_rate > 0 && rate != required_rate) {
    throw fail("sample rate " + std::to_string(rate) + " Hz, expected " +
               std::to_string(required_rate) + " Hz (resampling is not supported)");
  }
  const int width = bits / 8;
  Waveform wave;
  wave.sample_rate = rate;
  wave.samples.resize(data_size / width);
  const double scale = std::ldexp(1.0, -(bits - 1));
  for (std::size_t i = 0; i < wave.samples.size(); ++i) {
    const unsigned char* p = data + i * width;
    std::int32_t v = 0;
    if (bits == 16) {
      v = static_cast<std::int16_t>(le16(p));
    } else if (bits == 24) {
      v = static_cast<std::int32_t>((p[0] << 8) | (p[1] << 16) | (static_cast<std::uint32_t>(p[2]) << 24)) >> 8;
    } else {
      v = static_cast<std::int32_t>(le32(p));
    }
    wave.samples[i] = v * scale;
  }
  return wave;
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("wav " + path.string() + ": cannot open for writing");
  const auto n = static_cast<std::uint32_t>(wave.samples.size());
  out.write("RIFF", 4);
  put32(out, 36 + 2 * n);
  out.write("WAVEfmt ", 8);
  put32(out, 16);
  put16(out, 1);
  put16(out, 1);
  put32(out, static_cast<std::uint32_t>(wave.sample_rate));
  put32(out, static_cast<std::uint32_t>(wave.sample_rate) * 2);
  put16(out, 2);
  put16(out, 16);
  out.write("data", 4);
  put32(out, 2 * n);
  for (double s : wave.samples) {
    const double clipped = std::clamp(s, -1.0, 32767.0 / 32768.0);
    put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clipped * 32768.0))));
  }
  if (!out) throw std::runtime_error("wav " + path.string() + ": write failed");
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest " + path.string() + ": cannot open");
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string file, labels;
    if (!(fields >> file) || file[0] == '#') continue;
    if (!(fields >> labels)) {
      throw std::runtime_error("manifest " + path.string() + ":" + std::to_string(line_no) +
                               ": missing label");
    }
    ManifestEntry e;
    e.path = std::filesystem::path(file).is_absolute() ? std::filesystem::path(file) : base / file;
    std::istringstream split(labels);
    for (std::string label; std::getline(split, label, ',');) {
      if (!label.empty()) e.labels.push_back(label);
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("manifest " + path.string() + ": cannot open for writing");
  const auto base = path.parent_path();
  out << "# path labels\n";
  for (const auto& e : entries) {
    out << e.path.lexically_relative(base.empty() ? "." : base).generic_string() << ' ';
    for (std::size_t k = 0; k < e.labels.size(); ++k) out << (k ? "," : "") << e.labels[k];
    out << '\n';
  }
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

Matrix cached_logmel(const std::filesystem::path& wav, const MelConfig& cfg,
                     const std::filesystem::path& cache_dir) {
  if (cache_dir.empty()) return logmel(read_wav(wav, cfg.sample_rate).samples, cfg);
  const auto source = std::filesystem::absolute(wav).lexically_normal();
  const nlohmann::json key = {
      {"source", source.string()},
      {"size", std::filesystem::file_size(source)},
      {"mtime", std::filesystem::last_write_time(source).time_since_epoch().count()},
      {"mel", cfg.to_json()}};
  std::ostringstream name;
  name << std::hex << std::setw(16) << std::setfill('0') << fnv1a(key.dump()) << ".m2dspec";
  const auto entry = cache_dir / name.str();
  if (std::filesystem::exists(entry)) {
    try {
      Archive a = read_archive(entry);
      if (a.meta.value("cache_version", 0) == kSpectrogramCacheVersion && a.meta.value("key", nlohmann::json()) == key &&
          a.tensors.count("logmel")) {
        return a.tensors.at("logmel");
      }
    } catch (const std::runtime_error&) {
      // Unreadable entry: recompute and overwrite.
    }
  }
  Matrix spec = logmel(read_wav(wav, cfg.sample_rate).samples, cfg);
  std::filesystem::create_directories(cache_dir);
  Archive a;
  a.meta = {{"kind", "m2d-spectrogram-cache"}, {"cache_version", kSpectrogramCacheVersion}, {"key", key}};
  a.tensors["logmel"] = spec;
  write_archive(entry, a);
  return spec;
}

}  // namespace m2d
