#pragma once

#include <stdexcept>
#include <string>

#include "medvit/model.hpp"
#include "medvit/train.hpp"

namespace medvit {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Model plus training settings, read from a JSON document whose schema
/// lives in docs/config.schema.json.
struct RunConfig {
  ModelConfig model = ModelConfig::variant("micro");
  train::TrainConfig train;
};

std::string model_config_json(const ModelConfig& cfg);
/// Accepts {"variant": name, ...overrides} or a full field list. Unknown
/// keys are rejected.
ModelConfig parse_model_config(const std::string& json);

std::string run_config_json(const RunConfig& cfg);
/// {"model": {...}, "train": {"preset": "medmnist" | "nonmnist", ...overrides}}
RunConfig parse_run_config(const std::string& json);
RunConfig load_run_config(const std::string& path);

}  // namespace medvit
