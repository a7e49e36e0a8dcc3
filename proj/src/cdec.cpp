#include "crformer/cdec.hpp"

#include "crformer/error.hpp"
#include "crformer/instrument.hpp"
#include "crformer/ops.hpp"

namespace crformer {

template <typename T>
CdecParams<T> make_cdec(CounterRng& rng, const CdecDims& dims) {
  if (dims.layers < 1) throw ConfigError("calibration decoder needs at least one layer");
  CdecParams<T> p;
  for (std::size_t i = 0; i < dims.layers; ++i) {
    DecoderLayerParams<T> layer;
    layer.self_norm = make_layer_norm<T>(dims.width);
    layer.self_attn = make_attention<T>(rng, dims.width, dims.heads);
    layer.cross_norm = make_layer_norm<T>(dims.width);
    layer.cross_attn = make_attention<T>(rng, dims.width, dims.heads);
    layer.mlp_norm = make_layer_norm<T>(dims.width);
    layer.mlp = make_mlp<T>(rng, dims.width, dims.ff_width);
    p.layers.push_back(std::move(layer));
  }
  const std::size_t n_calib = dims.share_calibration ? 1 : dims.layers;
  for (std::size_t i = 0; i < n_calib; ++i) {
    p.calibration.push_back(make_qgm<T>(rng, dims.width, dims.num_queries, dims.grid_cells));
  }
  for (std::size_t i = 0; i < dims.layers; ++i) p.gains.push_back(Tensor<T>::scalar(T(0)));
  return p;
}

template <typename T>
Tensor<T> cdec_layer(const Tensor<T>& stream, const Tensor<T>& queries, const DecoderLayerParams<T>& p) {
  if (stream.rank() != 2 || queries.rank() != 2 || stream.dim(1) != queries.dim(1) ||
      stream.dim(1) != p.self_attn.width()) {
    throw DimensionError("cdec_layer: stream " + shape_str(stream.shape()) + " and queries " +
                         shape_str(queries.shape()) + " do not match width " + std::to_string(p.self_attn.width()));
  }
  Tensor<T> x;
  {
    ScopedTag tag("cdec.mhsa");
    x = add(stream, mhsa(p.self_attn, layernorm(p.self_norm, stream)));
  }
  {
    ScopedTag tag("cdec.mhca");
    x = add(x, mhca(p.cross_attn, layernorm(p.cross_norm, x), queries));
  }
  ScopedTag tag("cdec.mlp");
  return add(x, mlp(p.mlp, layernorm(p.mlp_norm, x)));
}

template <typename T>
CalibrationStep<T> calibrate(const Tensor<T>& words, std::span<const std::uint8_t> keep, const Tensor<T>& stream,
                             std::size_t grid_rows, std::size_t grid_cols, const Tensor<T>& previous,
                             const Tensor<T>& gain, const QgmParams<T>& qgm_params) {
  if (stream.rank() != 2 || stream.dim(0) != grid_rows * grid_cols) {
    throw DimensionError("calibrate: stream " + shape_str(stream.shape()) + " is not a " + std::to_string(grid_rows) +
                         "x" + std::to_string(grid_cols) + " grid");
  }
  CalibrationStep<T> step;
  step.calibration = qgm(reshape(stream, {grid_rows, grid_cols, stream.dim(1)}), words, keep, qgm_params).queries;
  if (step.calibration.shape() != previous.shape()) {
    throw DimensionError("calibrate: calibration queries " + shape_str(step.calibration.shape()) +
                         " do not match previous queries " + shape_str(previous.shape()));
  }
  ScopedTag tag("calibrate");
  step.queries = add(scale_by(step.calibration, gain), previous);
  return step;
}

template <typename T>
DecoderOutput<T> cdec_forward(const Tensor<T>& grid, const Tensor<T>& queries, const Tensor<T>& words,
                              std::span<const std::uint8_t> keep, const CdecParams<T>& p) {
  if (p.num_layers() < 1) throw ConfigError("calibration decoder needs at least one layer");
  if (grid.rank() != 3 || queries.rank() != 2) {
    throw DimensionError("cdec_forward: grid " + shape_str(grid.shape()) + " / queries " + shape_str(queries.shape()));
  }
  const std::size_t rows = grid.dim(0), cols = grid.dim(1), C = grid.dim(2);
  DecoderOutput<T> out;
  {
    ScopedTag tag("cdec.positions");
    out.stream = reshape(add(grid, sine_positional_2d<T>(rows, cols, C)), {rows * cols, C});
    out.initial_queries = add(queries, sine_positional_1d<T>(queries.dim(0), C));
  }
  out.queries = out.initial_queries;
  for (std::size_t n = 0; n < p.num_layers(); ++n) {
    out.stream = cdec_layer(out.stream, out.queries, p.layers[n]);
    auto step = calibrate(words, keep, out.stream, rows, cols, out.queries, p.gains[n], p.calibration_for(n));
    out.queries = std::move(step.queries);
    out.calibrations.push_back(std::move(step.calibration));
  }
  return out;
}

#define CRFORMER_INSTANTIATE_CDEC(T)                                                                     \
  template CdecParams<T> make_cdec(CounterRng&, const CdecDims&);                                        \
  template Tensor<T> cdec_layer(const Tensor<T>&, const Tensor<T>&, const DecoderLayerParams<T>&);        \
  template CalibrationStep<T> calibrate(const Tensor<T>&, std::span<const std::uint8_t>, const Tensor<T>&, \
                                        std::size_t, std::size_t, const Tensor<T>&, const Tensor<T>&,    \
                                        const QgmParams<T>&);                                            \
  template DecoderOutput<T> cdec_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                         std::span<const std::uint8_t>, const CdecParams<T>&);

CRFORMER_INSTANTIATE_CDEC(float)
CRFORMER_INSTANTIATE_CDEC(double)

}  // namespace crformer
