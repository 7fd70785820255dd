#include "m2d/experiment.hpp"

#include "m2d/json_io.hpp"
#include "m2d/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#ifndef M2D_SOURCE_REVISION
#define M2D_SOURCE_REVISION "unknown"
#endif

namespace m2d {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  return mix(mix(mix(a) ^ b) ^ c);
}

const std::set<std::string> kFineTuneFields = {
    "lr",         "optimizer",     "mixup_alpha", "rrc",          "spo_ratio",
    "spo_structured", "epochs",    "warmup_epochs", "batch_size", "weight_decay",
    "momentum",   "metric",        "rrc_freq_scale_min", "rrc_freq_scale_max",
    "rrc_time_scale_min", "rrc_time_scale_max"};

json train_section(TrainConfig t) {
  json j = t;
  j.erase("seed");
  j.erase("dump_dir");
  j.erase("steps_per_epoch");
  return j;
}

json probe_section(const ProbeConfig& p) {
  return {{"epochs", p.epochs},   {"batch_size", p.batch_size},
          {"lr", p.lr},           {"momentum", p.momentum},
          {"weight_decay", p.weight_decay}, {"metric", "auto"}};
}

json synthetic_section(const SyntheticCorpusConfig& s) {
  return {{"num_classes", s.num_classes},
          {"clips_per_class", s.clips_per_class},
          {"samples", s.samples},
          {"multi_label", s.multi_label},
          {"label_probability", s.label_probability},
          {"class_gain_min", s.class_gain_min},
          {"distractor_gain", s.distractor_gain},
          {"background_gain", s.background_gain},
          {"seed", s.seed}};
}

json sweep_section() {
  return {{"ratio_grid", {0.5, 0.6, 0.7, 0.8}}, {"target_ratios", {0.6, 0.7}}, {"seeds", {0}}};
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Recursive merge; objects merge key by key, everything else replaces.
void merge(json& base, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
      merge(base[it.key()], *it);
    } else {
      base[it.key()] = *it;
    }
  }
}

MetricKind resolve_metric(const json& value, bool multi_label) {
  const auto name = value.get<std::string>();
  if (name == "auto") return multi_label ? MetricKind::mAP : MetricKind::top1_accuracy;
  return metric_from_string(name);
}

template <class F>
auto config_guard(const std::string& section, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

std::string task_name(const json& config) { return config.at("data").value("task", "task"); }

}  // namespace

const char* source_revision() { return M2D_SOURCE_REVISION; }

std::vector<std::string> profile_names() { return {"toy", "paper-base"}; }

json profile(const std::string& name) {
  json c;
  c["seed"] = 0;
  c["mel"] = MelConfig{}.to_json();
  if (name == "toy") {
    c["profile"] = "toy";
    SyntheticCorpusConfig syn;
    c["data"] = {{"manifest", ""},      {"task", "synthetic_bands"}, {"frames", 208},
                 {"test_fraction", 0.25}, {"split_seed", 0},           {"synthetic", synthetic_section(syn)}};
    c["model"] = {{"patch_size", 16}, {"encoder", EncoderConfig::toy()}, {"predictor", PredictorConfig::toy()}};
    TrainConfig t = TrainConfig::toy();
    t.epochs = 30;
    t.warmup_epochs = 3;
    c["train"] = train_section(t);
    c["loop"] = {{"checkpoint_every", 100}, {"log_every", 20}, {"stop_after", 0}};
    c["probe"] = probe_section(ProbeConfig{});
    c["finetune"] = {{"preset", "vc1"}, {"epochs", 20}, {"warmup_epochs", 2}, {"batch_size", 16}};
  } else if (name == "paper-base") {
    c["profile"] = "paper-base";
    SyntheticCorpusConfig syn;
    syn.samples = samples_for_frames(608, MelConfig{});
    c["data"] = {{"manifest", ""},      {"task", "synthetic_bands"}, {"frames", 608},
                 {"test_fraction", 0.25}, {"split_seed", 0},           {"synthetic", synthetic_section(syn)}};
    c["model"] = {{"patch_size", 16},
                  {"encoder", EncoderConfig::vit_base()},
                  {"predictor", PredictorConfig::msm_mae()}};
    c["train"] = train_section(TrainConfig::full_scale());
    c["loop"] = {{"checkpoint_every", 1000}, {"log_every", 50}, {"stop_after", 0}};
    c["probe"] = probe_section(ProbeConfig{});
    c["finetune"] = {{"preset", "as20k"}};
  } else {
    std::string known;
    for (const auto& n : profile_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown profile '" + name + "' (known: " + known + ")");
  }
  c["sweep"] = sweep_section();
  return c;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  const std::string key = trim(assignment.substr(0, eq));
  const json value = parse_value(trim(assignment.substr(eq + 1)));
  json* node = &config;
  std::istringstream parts(key);
  std::vector<std::string> path;
  for (std::string p; std::getline(parts, p, '.');) path.push_back(p);
  for (std::size_t i = 0; i < path.size(); ++i) {
    const bool last = i + 1 == path.size();
    if (!node->is_object()) throw ConfigError("override '" + key + "': '" + path[i - 1] + "' is not a section");
    if (!node->contains(path[i])) {
      const bool finetune_field = last && path.size() == 2 && path[0] == "finetune" &&
                                  kFineTuneFields.count(path[i]);
      if (!finetune_field) throw ConfigError("override '" + key + "': no such key");
    }
    node = &(*node)[path[i]];
  }
  *node = value;
}

json resolve_config(const fs::path& file, const std::string& fallback_profile,
                    const std::string& env_overrides, const std::vector<std::string>& sets) {
  json from_file = json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("config " + file.string() + ": cannot open");
    try {
      from_file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + file.string() + ": " + e.what());
    }
    if (!from_file.is_object()) throw ConfigError("config " + file.string() + ": top level must be an object");
  }
  json config = profile(from_file.value("profile", fallback_profile));
  merge(config, from_file);
  std::istringstream env(env_overrides);
  for (std::string item; std::getline(env, item, ';');) {
    if (!trim(item).empty()) apply_override(config, item);
  }
  for (const auto& s : sets) apply_override(config, s);
  validate_config(config);
  return config;
}

MelConfig mel_of(const json& config) {
  return config_guard("mel", [&] {
    auto m = MelConfig::from_json(config.at("mel"));
    m.validate();
    return m;
  });
}

ShapeSpec shape_of(const json& config) {
  return config_guard("shape", [&] {
    return shape_for(1, mel_of(config).n_mels, config.at("data").at("frames").get<int>(),
                     config.at("model").at("patch_size").get<int>());
  });
}

EncoderConfig encoder_of(const json& config) {
  return config_guard("model.encoder", [&] {
    auto e = config.at("model").at("encoder").get<EncoderConfig>();
    e.validate();
    return e;
  });
}

PredictorConfig predictor_of(const json& config) {
  return config_guard("model.predictor", [&] {
    auto p = config.at("model").at("predictor").get<PredictorConfig>();
    p.validate();
    return p;
  });
}

TrainConfig train_of(const json& config) {
  return config_guard("train", [&] {
    auto t = config.at("train").get<TrainConfig>();
    t.seed = config.at("seed").get<std::uint64_t>();
    t.validate();
    return t;
  });
}

ProbeConfig probe_of(const json& config) {
  return config_guard("probe", [&] {
    const auto& j = config.at("probe");
    ProbeConfig p;
    p.epochs = j.value("epochs", p.epochs);
    p.batch_size = j.value("batch_size", p.batch_size);
    p.lr = j.value("lr", p.lr);
    p.momentum = j.value("momentum", p.momentum);
    p.weight_decay = j.value("weight_decay", p.weight_decay);
    p.metric = resolve_metric(j.value("metric", json("auto")),
                              config.at("data").at("synthetic").value("multi_label", false));
    p.seed = config.at("seed").get<std::uint64_t>();
    if (p.epochs < 1 || p.batch_size < 1 || !(p.lr > 0)) throw ConfigError("probe: epochs, batch_size, lr must be positive");
    return p;
  });
}

FineTuneConfig finetune_of(const json& config) {
  return config_guard("finetune", [&] {
    const auto& j = config.at("finetune");
    const auto preset = j.value("preset", std::string("vc1"));
    FineTuneConfig f;
    if (preset == "as20k") {
      f = FineTuneConfig::as20k();
    } else if (preset == "vc1") {
      f = FineTuneConfig::vc1();
    } else {
      throw ConfigError("finetune.preset: unknown preset '" + preset + "' (as20k, vc1)");
    }
    f.lr = j.value("lr", f.lr);
    if (j.contains("optimizer")) {
      const auto o = j.at("optimizer").get<std::string>();
      if (o != "sgd" && o != "adamw") throw ConfigError("finetune.optimizer: expected sgd or adamw");
      f.optimizer = o == "sgd" ? OptimizerKind::sgd : OptimizerKind::adamw;
    }
    f.mixup_alpha = j.value("mixup_alpha", f.mixup_alpha);
    f.rrc = j.value("rrc", f.rrc);
    f.rrc_config.freq_scale_min = j.value("rrc_freq_scale_min", f.rrc_config.freq_scale_min);
    f.rrc_config.freq_scale_max = j.value("rrc_freq_scale_max", f.rrc_config.freq_scale_max);
    f.rrc_config.time_scale_min = j.value("rrc_time_scale_min", f.rrc_config.time_scale_min);
    f.rrc_config.time_scale_max = j.value("rrc_time_scale_max", f.rrc_config.time_scale_max);
    f.spo_ratio = j.value("spo_ratio", f.spo_ratio);
    f.spo_structured = j.value("spo_structured", f.spo_structured);
    f.epochs = j.value("epochs", f.epochs);
    f.warmup_epochs = j.value("warmup_epochs", f.warmup_epochs);
    f.batch_size = j.value("batch_size", f.batch_size);
    f.weight_decay = j.value("weight_decay", f.weight_decay);
    f.momentum = j.value("momentum", f.momentum);
    const bool multi = config.at("data").at("synthetic").value("multi_label", false);
    if (j.contains("metric")) {
      f.metric = resolve_metric(j.at("metric"), multi);
    } else if (preset == "vc1") {
      f.metric = multi ? MetricKind::mAP : MetricKind::top1_accuracy;
    }
    f.seed = config.at("seed").get<std::uint64_t>();
    f.validate();
    return f;
  });
}

SyntheticCorpusConfig synthetic_of(const json& config) {
  return config_guard("data.synthetic", [&] {
    const auto& j = config.at("data").at("synthetic");
    SyntheticCorpusConfig s;
    s.num_classes = j.value("num_classes", s.num_classes);
    s.clips_per_class = j.value("clips_per_class", s.clips_per_class);
    s.samples = j.value("samples", s.samples);
    s.sample_rate = mel_of(config).sample_rate;
    s.multi_label = j.value("multi_label", s.multi_label);
    s.label_probability = j.value("label_probability", s.label_probability);
    s.class_gain_min = j.value("class_gain_min", s.class_gain_min);
    s.distractor_gain = j.value("distractor_gain", s.distractor_gain);
    s.background_gain = j.value("background_gain", s.background_gain);
    s.seed = j.value("seed", s.seed);
    if (s.num_classes < 2 || s.clips_per_class < 1) throw ConfigError("data.synthetic: need >= 2 classes and >= 1 clip per class");
    if (s.samples < 1) throw ConfigError("data.synthetic.samples must be positive");
    return s;
  });
}

void validate_config(const json& config) {
  for (const char* key : {"seed", "data", "mel", "model", "train", "loop", "probe", "finetune", "sweep"}) {
    if (!config.contains(key)) throw ConfigError(std::string("missing section '") + key + "'");
  }
  if (!config.at("seed").is_number_unsigned() && !config.at("seed").is_number_integer()) {
    throw ConfigError("seed must be a non-negative integer");
  }
  if (config.at("seed").is_number_integer() && config.at("seed").get<long long>() < 0) {
    throw ConfigError("seed must be a non-negative integer");
  }
  shape_of(config);
  encoder_of(config);
  predictor_of(config);
  const auto train = train_of(config);
  const auto& model = config.at("model");
  if (model.at("encoder").at("width").get<int>() % 4 != 0) throw ConfigError("model.encoder.width must be a multiple of 4");
  if (model.at("predictor").at("width").get<int>() % 4 != 0 && model.at("predictor").at("depth").get<int>() > 0) {
    throw ConfigError("model.predictor.width must be a multiple of 4");
  }
  (void)train;
  probe_of(config);
  finetune_of(config);
  synthetic_of(config);
  config_guard("data", [&] {
    const double f = config.at("data").at("test_fraction").get<double>();
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("data.test_fraction must lie in (0, 1)");
    config.at("data").at("manifest").get<std::string>();
    return 0;
  });
  config_guard("loop", [&] {
    if (config.at("loop").at("checkpoint_every").get<int>() < 1) throw ConfigError("loop.checkpoint_every must be >= 1");
    if (config.at("loop").at("log_every").get<int>() < 1) throw ConfigError("loop.log_every must be >= 1");
    if (config.at("loop").at("stop_after").get<std::int64_t>() < 0) throw ConfigError("loop.stop_after must be >= 0");
    return 0;
  });
  config_guard("sweep", [&] {
    const auto& s = config.at("sweep");
    for (const char* key : {"ratio_grid", "target_ratios", "seeds"}) {
      if (!s.at(key).is_array() || s.at(key).empty()) throw ConfigError(std::string("sweep.") + key + " must be a nonempty list");
    }
    for (const char* key : {"ratio_grid", "target_ratios"}) {
      for (double r : s.at(key).get<std::vector<double>>()) {
        if (!(r >= 0.0 && r < 1.0)) throw ConfigError(std::string("sweep.") + key + ": ratio outside [0, 1)");
      }
    }
    s.at("seeds").get<std::vector<std::uint64_t>>();
    return 0;
  });
}

Corpus load_corpus(const json& config, const fs::path& cache_dir) {
  const auto mel = mel_of(config);
  const auto manifest = config.at("data").at("manifest").get<std::string>();
  std::vector<Matrix> raw;
  std::vector<std::vector<std::string>> labels;
  Corpus corpus;
  if (!manifest.empty()) {
    const auto entries = read_manifest(manifest);
    if (entries.empty()) throw std::runtime_error("manifest " + manifest + " lists no clips");
    for (const auto& e : entries) {
      raw.push_back(cached_logmel(e.path, mel, cache_dir));
      labels.push_back(e.labels);
      corpus.sources.push_back(e.path.string());
    }
  } else {
    const auto syn = synthetic_of(config);
    const auto classes = synthetic_classes(syn.num_classes);
    const auto clips = synthetic_corpus(syn);
    LogMel front(mel);
    for (std::size_t i = 0; i < clips.size(); ++i) {
      raw.push_back(front(clips[i].waveform));
      std::vector<std::string> names;
      for (int c : clips[i].labels) names.push_back(classes[c].name);
      labels.push_back(names);
      corpus.sources.push_back("synthetic:" + std::to_string(i));
    }
  }
  std::set<std::string> names;
  bool multi = false;
  for (const auto& l : labels) {
    names.insert(l.begin(), l.end());
    multi = multi || l.size() != 1;
  }
  auto& data = corpus.data;
  data.class_names.assign(names.begin(), names.end());
  data.multi_label = multi;
  data.targets = Matrix::Zero(static_cast<Eigen::Index>(raw.size()), static_cast<Eigen::Index>(names.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (const auto& l : labels[i]) {
      const auto c = std::distance(data.class_names.begin(),
                                   std::find(data.class_names.begin(), data.class_names.end(), l));
      data.targets(static_cast<Eigen::Index>(i), c) = 1.0;
    }
  }
  corpus.stats = compute_stats(raw);
  for (const auto& r : raw) data.spectrograms.push_back(normalize(r, corpus.stats));
  return corpus;
}

void write_provenance(const fs::path& out, const json& config, const std::string& command) {
  fs::create_directories(out);
  write_json(out / "config.json", {{"config", config},
                                   {"source_revision", source_revision()},
                                   {"seed", config.at("seed")},
                                   {"command", command}});
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix(seed, static_cast<std::uint64_t>(epoch), 0x5eed));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Batch for one global step: the epoch's permutation, wrapping around when
// the corpus does not fill the last batch. Each clip gets a fresh random crop.
std::vector<PatchSequence> batch_for_step(const Corpus& corpus, const TrainConfig& t,
                                          const ShapeSpec& shape, std::int64_t step) {
  const std::size_t n = corpus.data.size();
  const std::int64_t epoch = step / t.steps_per_epoch;
  const std::int64_t within = step % t.steps_per_epoch;
  const auto order = epoch_order(n, t.seed, epoch);
  std::vector<PatchSequence> batch;
  for (int b = 0; b < t.batch_size; ++b) {
    const std::size_t idx = order[(static_cast<std::size_t>(within) * t.batch_size + b) % n];
    const auto clip = crop_or_pad(corpus.data.spectrograms[idx], shape.width(),
                                  mix(t.seed, static_cast<std::uint64_t>(step), idx));
    batch.push_back(partition(InputGrid::from_spectrogram(clip.spectrogram), shape.patch_size));
  }
  return batch;
}

// Drops metrics lines past `step` so a resumed run does not duplicate them.
void truncate_metrics(const fs::path& path, std::int64_t step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> kept;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    try {
      if (json::parse(line).value("step", std::int64_t{0}) <= step) kept.push_back(line);
    } catch (const json::parse_error&) {
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

json preprocessing_of(const json& config, const Corpus& corpus) {
  return {{"stats", corpus.stats.to_json()}, {"mel", config.at("mel")}, {"frames", config.at("data").at("frames")}};
}

}  // namespace

PretrainResult run_pretrain(const json& config, const Corpus& corpus, const fs::path& out, bool resume,
                            std::ostream* log) {
  if (corpus.data.size() == 0) throw std::runtime_error("pretrain: empty corpus");
  const ShapeSpec shape = shape_of(config);
  TrainConfig t = train_of(config);
  t.steps_per_epoch = std::max<std::int64_t>(
      1, (static_cast<std::int64_t>(corpus.data.size()) + t.batch_size - 1) / t.batch_size);
  t.dump_dir = out;
  fs::create_directories(out);
  const fs::path state_path = out / "state.m2dckpt";
  const fs::path metrics_path = out / "metrics.jsonl";

  PretrainResult result{init_duo(shape, encoder_of(config), predictor_of(config), t, t.seed), {}, out / "encoder.m2dckpt"};
  DuoState& state = result.state;
  if (resume && fs::exists(state_path)) {
    state = load_state(state_path);
    if (state.model.shape != shape || state.config.batch_size != t.batch_size ||
        state.config.total_steps() != t.total_steps()) {
      throw ConfigError("resume: " + state_path.string() + " does not match the resolved config");
    }
    state.config.dump_dir = out;
    truncate_metrics(metrics_path, state.step);
    if (log) *log << "resuming at step " << state.step << "\n";
  } else {
    write_provenance(out, config, "pretrain");
    std::ofstream(metrics_path, std::ios::trunc);
  }
  write_json(out / "stats.json", corpus.stats.to_json());

  const int every = config.at("loop").at("checkpoint_every").get<int>();
  const int log_every = config.at("loop").at("log_every").get<int>();
  std::ofstream metrics(metrics_path, std::ios::app);
  metrics << std::setprecision(17);
  const std::int64_t total = t.total_steps();
  const auto stop_after = config.at("loop").at("stop_after").get<std::int64_t>();
  const std::int64_t stop = stop_after > 0 ? std::min(total, state.step + stop_after) : total;
  while (state.step < stop) {
    const auto batch = batch_for_step(corpus, state.config, shape, state.step);
    const LossReport r = train_step(state, batch);
    result.history.push_back(r);
    metrics << r.to_json().dump() << '\n';
    if (log && (state.step % log_every == 0 || state.step == total)) {
      *log << "step " << state.step << "/" << total << " loss " << r.loss << " lr " << r.lr << "\n";
    }
    if (state.step % every == 0 && state.step < total) {
      metrics.flush();
      save_state(state, state_path);
    }
  }
  metrics.flush();
  save_state(state, state_path);
  if (state.step < total) return result;  // stopped early; resume later
  export_encoder(state, result.encoder_path, preprocessing_of(config, corpus));
  json summary = {{"steps", state.step}, {"encoder", result.encoder_path.string()}};
  if (!result.history.empty()) summary["final_loss"] = result.history.back().loss;
  write_json(out / "pretrain.json", summary);
  return result;
}

ProbeReport run_probe(const json& config, const EncoderCheckpoint& encoder, const Corpus& corpus,
                      const fs::path& out) {
  auto cfg = probe_of(config);
  cfg.metric = resolve_metric(config.at("probe").value("metric", json("auto")), corpus.data.multi_label);
  const auto [train_idx, test_idx] = train_test_split(
      corpus.data.size(), config.at("data").at("test_fraction").get<double>(),
      config.at("data").at("split_seed").get<std::uint64_t>());
  const auto report = probe_encoder(encoder, corpus.data.subset(train_idx), corpus.data.subset(test_idx), cfg);
  if (!out.empty()) {
    fs::create_directories(out);
    json r = report.to_json();
    r["kind"] = "probe";
    r["task"] = task_name(config);
    r["seed"] = config.at("seed");
    r["model"] = encoder.meta.value("label", std::string("encoder"));
    r["source_revision"] = source_revision();
    write_json(out / "result.json", r);
    std::ofstream(out / "metrics.jsonl", std::ios::app) << r.dump() << '\n';
  }
  return report;
}

void dump_features(const EncoderCheckpoint& encoder, const Corpus& corpus, const fs::path& path) {
  const Matrix z = extract_features(encoder, corpus.data.spectrograms);
  std::vector<std::vector<std::string>> labels(corpus.data.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (Eigen::Index c = 0; c < corpus.data.targets.cols(); ++c) {
      if (corpus.data.targets(static_cast<Eigen::Index>(i), c) > 0.5) labels[i].push_back(corpus.data.class_names[c]);
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_feature_dump(path, z, labels);
}

FineTuneReport run_finetune(const json& config, const EncoderCheckpoint& encoder, const Corpus& corpus,
                            const fs::path& out) {
  auto cfg = finetune_of(config);
  if (!config.at("finetune").contains("metric") && config.at("finetune").value("preset", "vc1") == "vc1") {
    cfg.metric = corpus.data.multi_label ? MetricKind::mAP : MetricKind::top1_accuracy;
  }
  const auto [train_idx, test_idx] = train_test_split(
      corpus.data.size(), config.at("data").at("test_fraction").get<double>(),
      config.at("data").at("split_seed").get<std::uint64_t>());
  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.jsonl", std::ios::trunc);
  const auto report = fine_tune(encoder, corpus.data.subset(train_idx), corpus.data.subset(test_idx), cfg,
                                [&](const json& epoch) { metrics << epoch.dump() << '\n' << std::flush; });
  json r = report.to_json();
  r["kind"] = "finetune";
  r["task"] = task_name(config);
  r["seed"] = config.at("seed");
  r["model"] = encoder.meta.value("label", std::string("encoder"));
  r["source_revision"] = source_revision();
  write_json(out / "result.json", r);
  return report;
}

std::vector<SweepCell> sweep_cells(const json& config, const std::string& kind) {
  const auto& s = config.at("sweep");
  const auto seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
  std::vector<std::pair<TargetInput, double>> grid;
  if (kind == "masking_ratio") {
    const auto mode = config.at("train").at("target_input").get<TargetInput>();
    for (double r : s.at("ratio_grid").get<std::vector<double>>()) grid.emplace_back(mode, r);
  } else if (kind == "target_input") {
    for (auto mode : {TargetInput::masked_only, TargetInput::all_patches}) {
      for (double r : s.at("target_ratios").get<std::vector<double>>()) grid.emplace_back(mode, r);
    }
  } else {
    throw ConfigError("unknown sweep kind '" + kind + "' (masking_ratio, target_input)");
  }
  if (grid.empty() || seeds.empty()) throw ConfigError("sweep grid is empty");
  std::vector<SweepCell> cells;
  for (const auto& [mode, ratio] : grid) {
    for (auto seed : seeds) {
      SweepCell c;
      c.masking_ratio = ratio;
      c.target_input = mode;
      c.seed = seed;
      c.id = "ratio" + fixed(ratio, 2) + "_" + json(mode).get<std::string>() + "_seed" + std::to_string(seed);
      cells.push_back(c);
    }
  }
  return cells;
}

namespace {

const char* kCsvHeader = "kind,cell,target_input,masking_ratio,seed,metric,value,final_loss,status";

std::vector<PlotSeries> sweep_series(const std::vector<SweepRow>& rows) {
  std::map<std::string, std::map<double, std::vector<double>>> by_mode;
  for (const auto& r : rows) {
    if (r.status != "ok" && r.status != "skipped") continue;
    by_mode[json(r.cell.target_input).get<std::string>()][r.cell.masking_ratio].push_back(r.value);
  }
  std::vector<PlotSeries> series;
  for (const auto& [mode, points] : by_mode) {
    PlotSeries s{mode, {}, {}};
    for (const auto& [x, ys] : points) {
      s.x.push_back(x);
      s.y.push_back(std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size()));
    }
    series.push_back(s);
  }
  return series;
}

}  // namespace

SweepSummary run_sweep(const json& config, const std::string& kind, const Corpus& corpus, const fs::path& out,
                       std::ostream* log) {
  const auto cells = sweep_cells(config, kind);
  fs::create_directories(out / "cells");
  write_provenance(out, config, "sweep " + kind);
  SweepSummary summary;
  for (const auto& cell : cells) {
    const fs::path dir = out / "cells" / cell.id;
    SweepRow row{cell, "ok", "", 0.0, 0.0};
    if (fs::exists(dir / "result.json")) {
      const json r = read_json(dir / "result.json");
      row.status = "skipped";
      row.metric = r.at("metric").get<std::string>();
      row.value = r.at("value").get<double>();
      row.final_loss = r.value("pretrain_final_loss", 0.0);
      if (log) *log << "cell " << cell.id << ": already complete\n";
      summary.rows.push_back(row);
      continue;
    }
    try {
      json cfg = config;
      cfg["seed"] = cell.seed;
      cfg["train"]["masking_ratio"] = cell.masking_ratio;
      cfg["train"]["target_input"] = cell.target_input;
      if (log) *log << "cell " << cell.id << ": pretraining\n";
      const auto pre = run_pretrain(cfg, corpus, dir, true, nullptr);
      auto encoder = load_encoder(pre.encoder_path);
      encoder.meta["label"] = cell.id;
      const auto report = run_probe(cfg, encoder, corpus);
      row.metric = to_string(report.metric);
      row.value = report.value;
      row.final_loss = pre.history.empty() ? 0.0 : pre.history.back().loss;
      json r = report.to_json();
      r["kind"] = "probe";
      r["sweep_cell"] = true;
      r["cell"] = cell.id;
      r["task"] = task_name(cfg);
      r["seed"] = cell.seed;
      r["pretrain_final_loss"] = row.final_loss;
      r["source_revision"] = source_revision();
      write_json(dir / "result.json", r);
      if (log) *log << "cell " << cell.id << ": " << row.metric << " " << row.value << "\n";
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
      ++summary.failures;
      if (log) *log << "cell " << cell.id << ": " << row.status << "\n";
    }
    summary.rows.push_back(row);
  }

  std::ofstream csv(out / "results.csv");
  csv << kCsvHeader << '\n' << std::setprecision(17);
  for (const auto& r : summary.rows) {
    csv << kind << ',' << r.cell.id << ',' << json(r.cell.target_input).get<std::string>() << ','
        << r.cell.masking_ratio << ',' << r.cell.seed << ',' << r.metric << ',' << r.value << ','
        << r.final_loss << ',' << csv_safe(r.status) << '\n';
  }
  const std::string metric = summary.rows.empty() ? "" : summary.rows.front().metric;
  std::ofstream(out / (kind + ".svg")) << svg_line_plot(
      kind == "masking_ratio" ? "Masking ratio ablation" : "Target input ablation", "Masking ratio",
      "Linear evaluation " + (metric.empty() ? std::string("score") : metric), sweep_series(summary.rows));
  return summary;
}

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series) {
  const double W = 560, H = 380, left = 70, right = 150, top = 40, bottom = 55;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series) {
    for (double x : s.x) x0 = std::min(x0, x), x1 = std::max(x1, x);
    for (double y : s.y) y0 = std::min(y0, y), y1 = std::max(y1, y);
  }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.05, x1 += 0.05;
  if (y1 - y0 < 1e-12) y0 -= 0.01, y1 += 0.01;
  const double pad = 0.08 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  const auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"};

  std::ostringstream o;
  o << std::setprecision(6);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << (W - right + left) / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title
    << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    o << "<text x=\"" << px(xv) << "\" y=\"" << H - bottom + 16 << "\" text-anchor=\"middle\">" << fixed(xv, 2)
      << "</text>\n";
    o << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fixed(yv, 3)
      << "</text>\n";
  }
  o << "<text x=\"" << (W - right + left) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << x_label
    << "</text>\n";
  o << "<text transform=\"translate(16," << (H - bottom + top) / 2
    << ") rotate(-90)\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* c = colors[i % 5];
    o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) o << (k ? " " : "") << px(s.x[k]) << "," << py(s.y[k]);
    o << "\"/>\n";
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      o << "<circle cx=\"" << px(s.x[k]) << "\" cy=\"" << py(s.y[k]) << "\" r=\"3.5\" fill=\"" << c << "\"/>\n";
    }
    const double ly = top + 10 + 18.0 * i;
    o << "<line x1=\"" << W - right + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 32 << "\" y2=\"" << ly
      << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - right + 38 << "\" y=\"" << ly + 4 << "\">" << s.name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

namespace {

struct CsvRow {
  std::string kind, cell, target_input, metric, status;
  double ratio = 0, value = 0;
  std::uint64_t seed = 0;
};

std::vector<CsvRow> read_results_csv(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream s(line);
    for (std::string cell; std::getline(s, cell, ',');) f.push_back(cell);
    if (f.size() < 9) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
    CsvRow r;
    r.kind = f[0];
    r.cell = f[1];
    r.target_input = f[2];
    r.ratio = std::stod(f[3]);
    r.seed = std::stoull(f[4]);
    r.metric = f[5];
    r.value = std::stod(f[6]);
    r.status = f[8];
    rows.push_back(r);
  }
  return rows;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string sweep_table(const std::vector<CsvRow>& rows, std::vector<PlotSeries>* series,
                        std::map<std::string, double>* mode_average) {
  std::set<double> ratios;
  std::map<std::string, std::map<double, std::vector<double>>> cells;
  for (const auto& r : rows) {
    if (r.status != "ok" && r.status != "skipped") continue;
    ratios.insert(r.ratio);
    cells[r.target_input][r.ratio].push_back(r.value);
  }
  std::ostringstream o;
  o << "| target input |";
  for (double x : ratios) o << ' ' << fixed(x, 2) << " |";
  o << " Average |\n|---|";
  for (std::size_t i = 0; i <= ratios.size(); ++i) o << "---|";
  o << '\n';
  for (const auto& [mode, by_ratio] : cells) {
    o << "| " << mode << " |";
    std::vector<double> means;
    PlotSeries s{mode, {}, {}};
    for (double x : ratios) {
      const auto it = by_ratio.find(x);
      if (it == by_ratio.end()) {
        o << " - |";
        continue;
      }
      const double m = mean(it->second);
      means.push_back(m);
      s.x.push_back(x);
      s.y.push_back(m);
      o << ' ' << fixed(m, 4) << " |";
    }
    const double avg = mean(means);
    (*mode_average)[mode] = avg;
    o << ' ' << fixed(avg, 4) << " |\n";
    series->push_back(s);
  }
  return o.str();
}

}  // namespace

std::string write_report(const fs::path& dir, std::ostream* warnings) {
  std::vector<fs::path> csvs, results;
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      if (e.path().filename() == "results.csv") csvs.push_back(e.path());
      if (e.path().filename() == "result.json") results.push_back(e.path());
    }
  }
  std::sort(csvs.begin(), csvs.end());
  std::sort(results.begin(), results.end());

  std::ostringstream md;
  md << "# Results\n\n";
  bool any = false;
  int plot_index = 0;
  for (const auto& path : csvs) {
    const auto rows = read_results_csv(path);
    if (rows.empty()) continue;
    any = true;
    const std::string kind = rows.front().kind;
    const std::string metric = rows.front().metric;
    const auto rel = fs::relative(path, dir).generic_string();
    md << "## " << (kind == "target_input" ? "Target input ablation" : "Masking ratio sweep") << " (" << rel
       << ")\n\n";
    md << "Metric: " << (metric.empty() ? "-" : metric) << ", mean over seeds per cell.\n\n";
    std::vector<PlotSeries> series;
    std::map<std::string, double> mode_average;
    md << sweep_table(rows, &series, &mode_average) << '\n';
    int failed = 0;
    for (const auto& r : rows) failed += (r.status != "ok" && r.status != "skipped");
    if (failed) md << failed << " cell(s) failed; see " << rel << ".\n\n";
    if (kind == "target_input" && mode_average.count("masked_only") && mode_average.count("all_patches")) {
      const double a = mode_average["masked_only"], b = mode_average["all_patches"];
      md << "masked_only average " << fixed(a, 4) << " vs all_patches average " << fixed(b, 4)
         << ": masked-only >= all-patches " << (a >= b ? "holds" : "does not hold") << " at this scale.\n\n";
    }
    const std::string plot = "report_" + std::to_string(plot_index++) + "_" + kind + ".svg";
    std::ofstream(dir / plot) << svg_line_plot(kind == "target_input" ? "Target input ablation" : "Masking ratio ablation",
                                               "Masking ratio", "Linear evaluation " + metric, series);
    md << "![" << kind << "](" << plot << ")\n\n";
  }

  // Runs: rows are (kind, model), columns are tasks.
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::vector<double>>> runs;
  std::set<std::string> tasks;
  std::map<std::string, std::string> task_metric;
  for (const auto& path : results) {
    json r;
    try {
      r = read_json(path);
    } catch (const std::exception& e) {
      if (warnings) *warnings << "warning: skipping " << path.string() << ": " << e.what() << "\n";
      continue;
    }
    if (r.value("sweep_cell", false) || !r.contains("value")) continue;
    const std::string task = r.value("task", "task");
    tasks.insert(task);
    task_metric[task] = r.value("metric", "");
    runs[{r.value("kind", "run"), r.value("model", "encoder")}][task].push_back(r.at("value").get<double>());
  }
  if (!runs.empty()) {
    any = true;
    md << "## Runs\n\nMean over seeds per task.\n\n| run | model |";
    for (const auto& t : tasks) md << ' ' << t << " (" << task_metric[t] << ") |";
    md << " Average |\n|---|---|";
    for (std::size_t i = 0; i <= tasks.size(); ++i) md << "---|";
    md << '\n';
    for (const auto& [key, by_task] : runs) {
      md << "| " << (key.first == "finetune" ? "fine-tune" : "linear probe") << " | " << key.second << " |";
      std::vector<double> means;
      for (const auto& t : tasks) {
        const auto it = by_task.find(t);
        if (it == by_task.end()) {
          md << " - |";
          continue;
        }
        means.push_back(mean(it->second));
        md << ' ' << fixed(means.back(), 4) << " |";
      }
      md << ' ' << fixed(mean(means), 4) << " |\n";
    }
    md << '\n';
  }
  if (!any) {
    md << "_No results found._\n";
    if (warnings) *warnings << "warning: no results found under " << dir.string() << "\n";
  }
  if (fs::is_directory(dir)) std::ofstream(dir / "report.md") << md.str();
  return md.str();
}

}  // namespace m2d
