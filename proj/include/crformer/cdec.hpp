#pragma once

// Calibration decoder: transformer decoder layers over vision tokens whose
// language keys/values are re-generated from each layer's output and mixed in
// through a learnable per-layer gain.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "crformer/neck_qgm.hpp"
#include "crformer/nn.hpp"
#include "crformer/tensor.hpp"

namespace crformer {

template <typename T>
struct DecoderLayerParams {
  LayerNormParams<T> self_norm;
  Attention<T> self_attn;
  LayerNormParams<T> cross_norm;
  Attention<T> cross_attn;
  LayerNormParams<T> mlp_norm;
  Mlp<T> mlp;
};

template <typename T>
struct CdecParams {
  std::vector<DecoderLayerParams<T>> layers;
  /// One QGM per layer, or a single entry shared by every layer.
  std::vector<QgmParams<T>> calibration;
  /// Calibration gains alpha_n, one [1] tensor per layer, initialized to 0.
  std::vector<Tensor<T>> gains;

  std::size_t num_layers() const { return layers.size(); }
  const QgmParams<T>& calibration_for(std::size_t layer) const {
    return calibration.size() == 1 ? calibration.front() : calibration.at(layer);
  }
};

struct CdecDims {
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t ff_width = 128;
  std::size_t layers = 3;
  std::size_t num_queries = 8;
  std::size_t grid_cells = 64;
  bool share_calibration = false;
};

/// Throws ConfigError when dims.layers < 1.
template <typename T>
CdecParams<T> make_cdec(CounterRng& rng, const CdecDims& dims);

/// One decoder layer: self-attention, cross-attention to `queries`, MLP, each
/// pre-normalized with a residual. stream[S, C], queries[N_q, C].
template <typename T>
Tensor<T> cdec_layer(const Tensor<T>& stream, const Tensor<T>& queries, const DecoderLayerParams<T>& p);

template <typename T>
struct CalibrationStep {
  Tensor<T> queries;      // alpha * calibration + previous
  Tensor<T> calibration;  // QGM(words, stream grid)
};

/// stream is [H_v*W_v, C] and is viewed as a [grid_rows, grid_cols, C] grid.
template <typename T>
CalibrationStep<T> calibrate(const Tensor<T>& words, std::span<const std::uint8_t> keep, const Tensor<T>& stream,
                             std::size_t grid_rows, std::size_t grid_cols, const Tensor<T>& previous,
                             const Tensor<T>& gain, const QgmParams<T>& qgm_params);

template <typename T>
struct DecoderOutput {
  Tensor<T> stream;   // F_dec^N, [H_v*W_v, C]
  Tensor<T> queries;  // F_q^N, [N_q, C]
  Tensor<T> initial_queries;  // F_q^0 (positions added)
  std::vector<Tensor<T>> calibrations;  // F_cq^n per layer
};

/// Adds 2D positions to the flattened grid and 1D positions to the queries,
/// then alternates cdec_layer and calibrate for every layer.
template <typename T>
DecoderOutput<T> cdec_forward(const Tensor<T>& grid, const Tensor<T>& queries, const Tensor<T>& words,
                              std::span<const std::uint8_t> keep, const CdecParams<T>& p);

template <typename T, typename F>
void visit_params(const std::string& prefix, DecoderLayerParams<T>& p, F&& f) {
  visit_params(prefix + ".self_norm", p.self_norm, f);
  visit_params(prefix + ".self_attn", p.self_attn, f);
  visit_params(prefix + ".cross_norm", p.cross_norm, f);
  visit_params(prefix + ".cross_attn", p.cross_attn, f);
  visit_params(prefix + ".mlp_norm", p.mlp_norm, f);
  visit_params(prefix + ".mlp", p.mlp, f);
}

template <typename T, typename F>
void visit_params(const std::string& prefix, CdecParams<T>& p, F&& f) {
  for (std::size_t i = 0; i < p.layers.size(); ++i) visit_params(prefix + ".layer" + std::to_string(i), p.layers[i], f);
  for (std::size_t i = 0; i < p.calibration.size(); ++i) {
    visit_params(prefix + ".calib" + std::to_string(i), p.calibration[i], f);
  }
  for (std::size_t i = 0; i < p.gains.size(); ++i) f(prefix + ".alpha" + std::to_string(i), p.gains[i]);
}

}  // namespace crformer
