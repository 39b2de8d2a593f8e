#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "mixssm/network.hpp"

namespace mixssm {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 5e-5;
  std::uint64_t seed = 0;
  /// Stop after this many optimizer steps; 0 means no limit.
  std::size_t max_steps = 0;
  std::string train_data;
  std::string eval_data;

  bool operator==(const TrainConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  bool operator==(const RunConfig&) const = default;
};

/// JSON documents. Every field is optional on input and falls back to its
/// default; a model section may start from `"preset": "default"` or
/// `"preset": "desk"`. Unknown keys are rejected with ConfigError. Emitted
/// documents list every field, so parse(emit(c)) == c.
std::string model_config_to_json(const ModelConfig& c, int indent = 2);
ModelConfig parse_model_config(const std::string& text);

std::string run_config_to_json(const RunConfig& c, int indent = 2);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace mixssm
