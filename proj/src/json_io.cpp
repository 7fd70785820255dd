#include "m2d/json_io.hpp"

namespace m2d {

void to_json(nlohmann::json& j, const ShapeSpec& s) {
  j = {{"patch_size", s.patch_size},
       {"channels", s.channels},
       {"n_freq", s.n_freq},
       {"n_time", s.n_time}};
}

void from_json(const nlohmann::json& j, ShapeSpec& s) {
  s.patch_size = j.value("patch_size", s.patch_size);
  s.channels = j.value("channels", s.channels);
  s.n_freq = j.value("n_freq", s.n_freq);
  s.n_time = j.value("n_time", s.n_time);
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"depth", c.depth}, {"heads", c.heads}, {"width", c.width}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.width = j.value("width", c.width);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

void to_json(nlohmann::json& j, const PredictorConfig& c) {
  j = {{"depth", c.depth}, {"heads", c.heads}, {"width", c.width}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, PredictorConfig& c) {
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.width = j.value("width", c.width);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, AdamWConfig& c) {
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"masking_ratio", c.masking_ratio},
       {"target_input", c.target_input},
       {"objective", c.objective},
       {"standardize_axis", c.standardize_axis},
       {"epochs", c.epochs},
       {"warmup_epochs", c.warmup_epochs},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"scale_lr_by_batch", c.scale_lr_by_batch},
       {"min_lr", c.min_lr},
       {"steps_per_epoch", c.steps_per_epoch},
       {"tau_start", c.tau_start},
       {"tau_end", c.tau_end},
       {"adamw", c.adamw},
       {"seed", c.seed},
       {"dump_dir", c.dump_dir.string()}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.masking_ratio = j.value("masking_ratio", c.masking_ratio);
  c.target_input = j.value("target_input", c.target_input);
  c.objective = j.value("objective", c.objective);
  c.standardize_axis = j.value("standardize_axis", c.standardize_axis);
  c.epochs = j.value("epochs", c.epochs);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.scale_lr_by_batch = j.value("scale_lr_by_batch", c.scale_lr_by_batch);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.tau_start = j.value("tau_start", c.tau_start);
  c.tau_end = j.value("tau_end", c.tau_end);
  if (j.contains("adamw")) c.adamw = j.at("adamw").get<AdamWConfig>();
  c.seed = j.value("seed", c.seed);
  c.dump_dir = j.value("dump_dir", c.dump_dir.string());
}

}  // namespace m2d
