#pragma once

// Training loop, evaluation, checkpoint conversion and the whole-model
// gradient check.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crformer/checkpoint.hpp"
#include "crformer/config.hpp"
#include "crformer/data.hpp"
#include "crformer/gradcheck.hpp"
#include "crformer/metrics.hpp"
#include "crformer/model.hpp"
#include "crformer/optim.hpp"

namespace crformer {

struct StepRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double l_seg = 0.0;
  double l_re = 0.0;
  double l_total = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;  // optimizer steps taken so far
  std::optional<MetricReport> train;
  std::optional<MetricReport> val;
};

/// Append-only; steps and epochs interleave in step order.
struct RunLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;

  std::string to_jsonl() const;
};

nlohmann::json to_json(const MetricReport& r);
nlohmann::json to_json(const StepRecord& s);
nlohmann::json to_json(const EpochRecord& e);

template <typename T>
struct TrainState {
  ModelParams<T> params;
  AdamState<T> adam;
  std::vector<std::string> trainable;  // names, in optimizer order
  std::uint64_t step = 0;
};

/// Parameters the optimizer updates: everything, minus the calibration path
/// when the calibration decoder is disabled (its gains then stay at 0).
std::vector<std::string> trainable_names(const Config& cfg, const std::vector<std::string>& all);

template <typename T>
TrainState<T> init_train_state(const Config& cfg);

template <typename T>
Checkpoint make_checkpoint(const Config& cfg, const TrainState<T>& state);
Config checkpoint_config(const Checkpoint& ck);
/// Rebuilds the full training state; throws FormatError on missing or
/// mis-shaped tensors.
template <typename T>
TrainState<T> restore_train_state(const Checkpoint& ck);

struct TrainOptions {
  std::string out_dir;  // empty: nothing written
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;  // last good state
  RunLog log;
  bool aborted = false;
  std::string failure;
};

/// Generates the configured splits, then trains.
TrainResult train(const Config& cfg, const TrainOptions& opts = {});
TrainResult train(const Config& cfg, const std::vector<SampleRecord>& train_set,
                  const std::vector<SampleRecord>& val_set, const TrainOptions& opts = {});

/// Inference-mode masks for every sample.
template <typename T>
std::vector<BinaryMask> predict_masks(const ModelParams<T>& params, std::span<const SampleRecord> samples);

/// Throws ContractError for an empty split.
template <typename T>
MetricReport evaluate(const ModelParams<T>& params, std::span<const SampleRecord> samples);
MetricReport evaluate(const Checkpoint& ck, std::span<const SampleRecord> samples);
std::vector<BinaryMask> predict_masks(const Checkpoint& ck, std::span<const SampleRecord> samples);

/// Toy dimensions for the whole-model gradient check.
Config gradcheck_config();

struct ModelGradcheck {
  GradReport report;
  std::size_t num_params = 0;
  std::string text;
  double seconds = 0.0;
};

/// Finite-difference check of the total loss over every parameter, in double
/// precision, on a generated sample whose expression has `token_length`
/// tokens (global slot included).
ModelGradcheck model_gradcheck(const Config& cfg, std::size_t token_length, double h, double tol);

}  // namespace crformer
