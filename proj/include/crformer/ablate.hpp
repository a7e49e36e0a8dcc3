#pragma once

// Ablation runner: one training run per table cell, every cell sharing the
// data seeds of the base config.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "crformer/config.hpp"
#include "crformer/metrics.hpp"

namespace crformer {

enum class AblationAxis { kNumQueries, kLayers, kOmegaRe, kComponents };

/// Accepts nq, layers, omega_re, components; anything else is a UsageError.
AblationAxis parse_axis(std::string_view name);
std::string to_string(AblationAxis axis);

struct AblationCell {
  std::vector<std::string> key;  // one value per key column
  Config config;
};

/// Key column names, e.g. {"N", "cdec"} for the layers axis.
std::vector<std::string> key_columns(AblationAxis axis);
std::vector<AblationCell> ablation_cells(const Config& base, AblationAxis axis);

struct AblationRow {
  std::vector<std::string> key;
  double miou = 0.0;
  std::map<double, double> precision;
  std::size_t runs = 0;
  std::size_t aborted = 0;
};

struct AblationTable {
  AblationAxis axis = AblationAxis::kNumQueries;
  std::string split;  // "val", or "train" when the base config has no val split
  std::vector<AblationRow> rows;

  std::string to_csv() const;
};

/// Trains every cell once per model seed and averages the final-epoch
/// reports. An empty seed list means the base config's seed.
AblationTable run_ablation(const Config& base, AblationAxis axis, const std::vector<std::uint64_t>& seeds = {});

struct DirectionStats {
  std::string name;
  std::vector<double> deltas;  // per seed, treatment minus control mIoU
  std::size_t positive = 0;
  double mean = 0.0;
};

/// CDec on minus off, and omega_re 0.1 minus 0, one pair of runs per seed.
std::vector<DirectionStats> directional_comparison(const Config& base, const std::vector<std::uint64_t>& seeds);

}  // namespace crformer
