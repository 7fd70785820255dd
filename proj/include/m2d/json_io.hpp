#pragma once

// JSON conversions for configuration types, used by checkpoints and the CLI.

#include "m2d/backbone.hpp"
#include "m2d/duo_trainer.hpp"
#include "m2d/patch_core.hpp"

#include <json.hpp>

namespace m2d {

NLOHMANN_JSON_SERIALIZE_ENUM(TargetInput, {{TargetInput::masked_only, "masked_only"},
                                           {TargetInput::all_patches, "all_patches"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Objective, {{Objective::m2d, "m2d"},
                                         {Objective::mae_reconstruction, "mae_reconstruction"}})
NLOHMANN_JSON_SERIALIZE_ENUM(StandardizeAxis, {{StandardizeAxis::per_token, "per_token"},
                                               {StandardizeAxis::per_feature, "per_feature"}})

void to_json(nlohmann::json& j, const ShapeSpec& s);
void from_json(const nlohmann::json& j, ShapeSpec& s);
void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const PredictorConfig& c);
void from_json(const nlohmann::json& j, PredictorConfig& c);
void to_json(nlohmann::json& j, const AdamWConfig& c);
void from_json(const nlohmann::json& j, AdamWConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace m2d
