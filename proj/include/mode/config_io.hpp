#pragma once

#include "json.hpp"
#include "mode/model.hpp"
#include "mode/trainer.hpp"

namespace mode {

// Flat JSON object holding every ModelConfig and TrainConfig field.
nlohmann::json config_to_json(const ModelConfig& model, const TrainConfig& train);
// Overwrites the fields present in `j`; unknown keys and mistyped values
// raise ConfigError naming the key.
void apply_config_json(const nlohmann::json& j, ModelConfig& model, TrainConfig& train);

}  // namespace mode
