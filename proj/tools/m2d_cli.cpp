// m2d: pretrain | probe | finetune | sweep | export | report
//
// Exit codes: 0 ok, 1 run or sweep-cell failure, 2 configuration error.

#include "m2d/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string profile = "toy";
  std::vector<std::string> sets;
  std::string out;
  std::string cache_dir;
  long long seed = -1;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--profile", c.profile, "base profile when the config names none (toy, paper-base)");
  cmd->add_option("--set", c.sets, "override key.path=value (repeatable)");
  cmd->add_option("--seed", c.seed, "run seed");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
  cmd->add_option("--cache-dir", c.cache_dir, "log-mel cache directory (default: $M2D_CACHE_DIR)");
}

json resolve(const Common& c) {
  const char* env = std::getenv("M2D_OVERRIDES");
  auto sets = c.sets;
  if (c.seed >= 0) sets.push_back("seed=" + std::to_string(c.seed));
  return m2d::resolve_config(c.config, c.profile, env ? env : "", sets);
}

fs::path cache_dir(const Common& c) {
  if (!c.cache_dir.empty()) return c.cache_dir;
  const char* env = std::getenv("M2D_CACHE_DIR");
  return env ? fs::path(env) : fs::path();
}

m2d::EncoderCheckpoint encoder_for(const std::string& checkpoint, const json& config) {
  if (checkpoint == "random") {
    auto e = m2d::random_encoder(m2d::shape_of(config), m2d::encoder_of(config), config.at("seed").get<std::uint64_t>());
    e.meta["label"] = "random-init";
    return e;
  }
  auto e = m2d::load_encoder(checkpoint);
  const fs::path p(checkpoint);
  e.meta["label"] = p.has_parent_path() ? p.parent_path().filename().string() : p.stem().string();
  if (e.shape != m2d::shape_of(config)) {
    throw m2d::ConfigError("checkpoint " + checkpoint + " was trained on a different patch grid than data.frames/mel.n_mels give");
  }
  return e;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"M2D audio representation learning: pre-training, evaluation and ablation sweeps"};
  app.require_subcommand(1);

  Common pre, probe, ft, sweep, exp, rep;
  bool resume = false, dump = false;
  std::string probe_ckpt, ft_ckpt, exp_ckpt, sweep_kind, only_cell;

  auto* c_pre = app.add_subcommand("pretrain", "self-supervised pre-training");
  add_common(c_pre, pre);
  c_pre->add_flag("--resume", resume, "continue from OUT/state.m2dckpt");

  auto* c_probe = app.add_subcommand("probe", "linear evaluation of a frozen encoder");
  add_common(c_probe, probe);
  c_probe->add_option("--checkpoint", probe_ckpt, "encoder checkpoint, or 'random'")->required();
  c_probe->add_flag("--dump-features", dump, "also write OUT/features.csv (z'' per clip)");

  auto* c_ft = app.add_subcommand("finetune", "fine-tune an encoder with a linear head");
  add_common(c_ft, ft);
  c_ft->add_option("--checkpoint", ft_ckpt, "encoder checkpoint, or 'random'")->required();

  auto* c_sweep = app.add_subcommand("sweep", "ablation sweep (pretrain + probe per cell)");
  add_common(c_sweep, sweep);
  c_sweep->add_option("kind", sweep_kind, "masking_ratio or target_input")
      ->required()
      ->check(CLI::IsMember({"masking_ratio", "target_input"}));

  auto* c_exp = app.add_subcommand("export", "encoder-only checkpoint from a training state");
  add_common(c_exp, exp);
  c_exp->add_option("--checkpoint", exp_ckpt, "training state (state.m2dckpt)")->required();

  auto* c_rep = app.add_subcommand("report", "markdown tables and plots from a results directory");
  std::string rep_dir;
  c_rep->add_option("dir", rep_dir, "results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*c_pre) {
      const auto config = resolve(pre);
      const auto corpus = m2d::load_corpus(config, cache_dir(pre));
      const auto r = m2d::run_pretrain(config, corpus, pre.out, resume, &std::cout);
      std::cout << "encoder written to " << r.encoder_path.string() << "\n";
    } else if (*c_probe) {
      const auto config = resolve(probe);
      const auto corpus = m2d::load_corpus(config, cache_dir(probe));
      m2d::write_provenance(probe.out, config, "probe --checkpoint " + probe_ckpt);
      const auto enc = encoder_for(probe_ckpt, config);
      const auto r = m2d::run_probe(config, enc, corpus, probe.out);
      if (dump) m2d::dump_features(enc, corpus, fs::path(probe.out) / "features.csv");
      std::cout << m2d::to_string(r.metric) << " " << r.value << "\n";
    } else if (*c_ft) {
      const auto config = resolve(ft);
      const auto corpus = m2d::load_corpus(config, cache_dir(ft));
      m2d::write_provenance(ft.out, config, "finetune --checkpoint " + ft_ckpt);
      const auto r = m2d::run_finetune(config, encoder_for(ft_ckpt, config), corpus, ft.out);
      std::cout << m2d::to_string(r.metric) << " " << r.value << "\n";
    } else if (*c_sweep) {
      const auto config = resolve(sweep);
      const auto corpus = m2d::load_corpus(config, cache_dir(sweep));
      const auto s = m2d::run_sweep(config, sweep_kind, corpus, sweep.out, &std::cout);
      std::cout << s.rows.size() << " cells, " << s.failures << " failed; table in "
                << (fs::path(sweep.out) / "results.csv").string() << "\n";
      return s.failures ? 1 : 0;
    } else if (*c_exp) {
      const auto state = m2d::load_state(exp_ckpt);
      json pre_json = json::object();
      const auto stats = fs::path(exp_ckpt).parent_path() / "stats.json";
      if (fs::exists(stats)) {
        std::ifstream in(stats);
        pre_json["stats"] = json::parse(in);
      }
      fs::path out(exp.out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      m2d::export_encoder(state, out, pre_json);
      std::cout << "encoder written to " << out.string() << "\n";
    } else if (*c_rep) {
      const auto text = m2d::write_report(rep_dir, &std::cerr);
      std::cout << text;
    }
  } catch (const m2d::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
