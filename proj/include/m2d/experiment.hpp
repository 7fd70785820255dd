#pragma once

// Experiment plumbing behind the `m2d` command line tool: configuration
// profiles and overrides, corpus loading, pretrain / probe / fine-tune runs
// with provenance, sweeps and report tabulation.
//
// Configuration is one JSON document. Named profiles ("toy", "paper-base")
// supply every key; a config file is merged on top, then M2D_OVERRIDES
// (`key.path=value;key.path=value`), then --set pairs. Values parse as JSON
// and fall back to plain strings. Overrides must name an existing key.

#include "m2d/audio_pipeline.hpp"
#include "m2d/duo_trainer.hpp"
#include "m2d/eval_harness.hpp"
#include "m2d/synthetic.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2d {

/// Invalid configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Build identifier recorded in every run directory.
const char* source_revision();

nlohmann::json profile(const std::string& name);
std::vector<std::string> profile_names();

/// Sets `dotted.key` to `value` (parsed as JSON when possible). Throws
/// ConfigError when the key does not exist.
void apply_override(nlohmann::json& config, const std::string& assignment);
/// Profile (from the file's "profile" key or `fallback_profile`), then the
/// file, then `env_overrides` (';'-separated), then `sets`.
nlohmann::json resolve_config(const std::filesystem::path& file, const std::string& fallback_profile,
                              const std::string& env_overrides, const std::vector<std::string>& sets);

ShapeSpec shape_of(const nlohmann::json& config);
EncoderConfig encoder_of(const nlohmann::json& config);
PredictorConfig predictor_of(const nlohmann::json& config);
TrainConfig train_of(const nlohmann::json& config);
ProbeConfig probe_of(const nlohmann::json& config);
FineTuneConfig finetune_of(const nlohmann::json& config);
MelConfig mel_of(const nlohmann::json& config);
SyntheticCorpusConfig synthetic_of(const nlohmann::json& config);
/// Checks every typed section; throws ConfigError with the offending field.
void validate_config(const nlohmann::json& config);

struct Corpus {
  TaskData data;  // normalized, cropped or padded to the model frame count
  DatasetStats stats;
  std::vector<std::string> sources;
};

/// From data.manifest (WAV files, log-mel cached under `cache_dir`) or, when
/// no manifest is given, the in-memory synthetic corpus.
Corpus load_corpus(const nlohmann::json& config, const std::filesystem::path& cache_dir = {});

/// Writes config.json: {"config", "source_revision", "seed", "command"}.
void write_provenance(const std::filesystem::path& out, const nlohmann::json& config,
                      const std::string& command);

struct PretrainResult {
  DuoState state;
  std::vector<LossReport> history;  // steps run by this call
  std::filesystem::path encoder_path;
};

/// Pre-trains on every clip of `corpus`. Writes config.json, metrics.jsonl
/// (one LossReport per step), state.m2dckpt (every loop.checkpoint_every
/// steps and at the end) and encoder.m2dckpt. With `resume`, continues from
/// an existing state.m2dckpt in `out`. loop.stop_after > 0 ends the call after
/// that many steps (state saved, no encoder export) so a later resume finishes.
PretrainResult run_pretrain(const nlohmann::json& config, const Corpus& corpus,
                            const std::filesystem::path& out, bool resume = false,
                            std::ostream* log = nullptr);

/// Linear probe of `encoder` on the corpus split (data.test_fraction,
/// data.split_seed). Writes result.json and appends metrics.jsonl in `out`
/// when it is non-empty.
ProbeReport run_probe(const nlohmann::json& config, const EncoderCheckpoint& encoder,
                      const Corpus& corpus, const std::filesystem::path& out = {});

/// z'' of every corpus clip, in corpus order, as a feature dump CSV.
void dump_features(const EncoderCheckpoint& encoder, const Corpus& corpus,
                   const std::filesystem::path& path);

FineTuneReport run_finetune(const nlohmann::json& config, const EncoderCheckpoint& encoder,
                            const Corpus& corpus, const std::filesystem::path& out);

struct SweepCell {
  std::string id;
  double masking_ratio = 0.6;
  TargetInput target_input = TargetInput::masked_only;
  std::uint64_t seed = 0;
};

/// masking_ratio: sweep.ratio_grid x seeds. target_input: both modes x
/// sweep.target_ratios x seeds.
std::vector<SweepCell> sweep_cells(const nlohmann::json& config, const std::string& kind);

struct SweepRow {
  SweepCell cell;
  std::string status;  // "ok", "skipped" (already complete) or "failed: ..."
  std::string metric;
  double value = 0.0;
  double final_loss = 0.0;
};

struct SweepSummary {
  std::vector<SweepRow> rows;
  int failures = 0;
};

/// Pretrain + probe per cell under out/cells/<id>. Completed cells (with a
/// result.json) are reused. Failures are recorded and the sweep continues.
/// Writes out/results.csv and out/<kind>.svg.
SweepSummary run_sweep(const nlohmann::json& config, const std::string& kind, const Corpus& corpus,
                       const std::filesystem::path& out, std::ostream* log = nullptr);

/// Minimal SVG line chart; one series per entry of `series`.
struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};
std::string svg_line_plot(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<PlotSeries>& series);

/// Tabulates results.csv files and run result.json files found under `dir`
/// into markdown (mean over seeds per cell, plus an average column/row).
/// Writes dir/report.md and returns its text. `warnings` receives a note
/// when nothing is found.
std::string write_report(const std::filesystem::path& dir, std::ostream* warnings = nullptr);

}  // namespace m2d
