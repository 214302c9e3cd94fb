#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "ibf/dataset.hpp"
#include "ibf/localization.hpp"
#include "ibf/model.hpp"
#include "ibf/training.hpp"

namespace ibf {

/// Everything a CLI run can be configured with. A config file is a JSON
/// object with any subset of the sections "synth", "model", "train",
/// "localize" and "sweep"; missing keys keep their defaults and unknown keys
/// are rejected.
struct RunConfig {
    SynthConfig synth;
    ModelConfig model = ModelConfig::toy_default();
    TrainingConfig train;
    LocalizationConfig localize;
    std::vector<double> betas{0.0, 1e-4, 1e-3, 1e-2};

    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Overlays `overrides` on the defaults. ConfigError on unknown keys, type
/// mismatches or values that fail validation.
RunConfig run_config_from_json(const nlohmann::json& overrides);
RunConfig load_run_config(const std::filesystem::path& path);

TrainingConfig training_config_from_json(const nlohmann::json& j);
LocalizationConfig localization_config_from_json(const nlohmann::json& j);

}  // namespace ibf
