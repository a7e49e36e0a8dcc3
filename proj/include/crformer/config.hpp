#pragma once

// Run configuration and its versioned JSON form.

#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "crformer/data.hpp"
#include "crformer/heads.hpp"
#include "crformer/model.hpp"

namespace crformer {

inline constexpr int kConfigSchemaVersion = 1;

enum class Precision { kFloat32, kFloat64 };

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 300;
  std::size_t batch_size = 8;
};

struct DataConfig {
  std::size_t grid = 4;
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  std::size_t max_retries = 64;
  std::size_t train_size = 32;
  std::size_t val_size = 0;
  std::uint64_t train_seed = 1;
  std::uint64_t val_seed = 2;
};

struct Config {
  int schema_version = kConfigSchemaVersion;
  ModelConfig model;
  LossWeights loss;
  OptimConfig optim;
  DataConfig data;
  std::uint64_t seed = 7;
  Precision precision = Precision::kFloat32;
  bool cdec_enabled = true;
  std::size_t eval_every = 1;
  std::string rng = "splitmix64-counter";

  /// Throws ConfigError on any invalid field.
  void validate() const;
  DataSpec data_spec() const;
};

/// Desk-scale defaults.
Config default_config();
/// The full-scale hyperparameters (not runnable on a desk machine).
Config full_scale_config();

nlohmann::json to_json(const Config& c);
/// Missing keys keep their defaults; unknown keys and schema mismatches throw
/// ConfigError.
Config config_from_json(const nlohmann::json& j);
Config load_config(const std::string& path);

nlohmann::json to_json(const DataSpec& s);
DataSpec data_spec_from_json(const nlohmann::json& j);

std::string to_string(Precision p);

}  // namespace crformer
