#include "crformer/neck_qgm.hpp"

#include "crformer/error.hpp"
#include "crformer/instrument.hpp"
#include "crformer/ops.hpp"

namespace crformer {

template <typename T>
NeckParams<T> make_neck(CounterRng& rng, std::size_t width, std::size_t c2, std::size_t c3, std::size_t c4) {
  NeckParams<T> p;
  p.v4 = make_linear<T>(rng, c4, width);
  p.m4 = make_linear<T>(rng, width, width);
  p.v3 = make_linear<T>(rng, c3, width);
  p.m3 = make_linear<T>(rng, 2 * width, width);
  p.v2 = make_linear<T>(rng, c2, width);
  p.aggregate = make_conv<T>(rng, 1, 5 * width, width);
  p.coord_fuse = make_conv<T>(rng, 1, width + 2, width);
  return p;
}

template <typename T>
QgmParams<T> make_qgm(CounterRng& rng, std::size_t width, std::size_t num_queries, std::size_t grid_cells) {
  if (num_queries == 0) throw ConfigError("query generation needs at least one query");
  QgmParams<T> p;
  p.reduce = make_conv<T>(rng, 3, width, num_queries);
  p.grid_proj = make_linear<T>(rng, grid_cells, width);
  p.word_proj = make_linear<T>(rng, width, width);
  p.value_proj = make_linear<T>(rng, width, width);
  return p;
}

template <typename T>
Tensor<T> coord_grid(std::size_t rows, std::size_t cols) {
  auto spread = [](std::size_t i, std::size_t n) {
    return n <= 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  std::vector<T> v(rows * cols * 2);
  for (std::size_t y = 0; y < rows; ++y) {
    for (std::size_t x = 0; x < cols; ++x) {
      v[(y * cols + x) * 2] = static_cast<T>(spread(x, cols));
      v[(y * cols + x) * 2 + 1] = static_cast<T>(spread(y, rows));
    }
  }
  return Tensor<T>({rows, cols, 2}, std::move(v));
}

template <typename T>
Tensor<T> fusion_neck(const FeaturePyramid<T>& pyr, const NeckParams<T>& p) {
  const auto& s2 = pyr.f2.shape();
  const auto& s3 = pyr.f3.shape();
  const auto& s4 = pyr.f4.shape();
  if (s2.size() != 3 || s3.size() != 3 || s4.size() != 3 || s3[0] != 2 * s4[0] || s3[1] != 2 * s4[1] ||
      s2[0] != 2 * s3[0] || s2[1] != 2 * s3[1]) {
    throw DimensionError("fusion_neck: inconsistent pyramid extents " + shape_str(s2) + ", " + shape_str(s3) + ", " +
                         shape_str(s4));
  }
  ScopedTag tag("neck");
  const Tensor<T> m4 = upsample2x(relu(linear(p.v4, pyr.f4)));
  const Tensor<T> m3 = concat<T>({relu(linear(p.m4, m4)), relu(linear(p.v3, pyr.f3))}, 2);
  const Tensor<T> m2 = concat<T>({relu(linear(p.m3, m3)), relu(linear(p.v2, avgpool2x2(pyr.f2)))}, 2);
  const Tensor<T> fused = conv(p.aggregate, concat<T>({m2, m3, m4}, 2));
  return conv(p.coord_fuse, concat<T>({fused, coord_grid<T>(s3[0], s3[1])}, 2));
}

template <typename T>
QuerySet<T> qgm(const Tensor<T>& grid, const Tensor<T>& words, std::span<const std::uint8_t> keep,
                const QgmParams<T>& p) {
  if (grid.rank() != 3 || grid.dim(0) * grid.dim(1) != p.grid_proj.in()) {
    throw DimensionError("qgm: grid " + shape_str(grid.shape()) + " does not match " +
                         std::to_string(p.grid_proj.in()) + " grid cells");
  }
  ScopedTag tag("qgm");
  const std::size_t cells = grid.dim(0) * grid.dim(1);
  const std::size_t nq = p.reduce.weight.dim(1);
  const Tensor<T> per_query = transpose(reshape(conv(p.reduce, grid), {cells, nq}));
  const Tensor<T> grid_feat = relu(linear(p.grid_proj, per_query));
  const Tensor<T> word_feat = relu(linear(p.word_proj, words));
  QuerySet<T> out;
  out.attention = softmax_lastdim(matmul_nt(grid_feat, word_feat), keep);
  out.queries = matmul(out.attention, relu(linear(p.value_proj, words)));
  return out;
}

#define CRFORMER_INSTANTIATE_NECK(T)                                                                   \
  template NeckParams<T> make_neck(CounterRng&, std::size_t, std::size_t, std::size_t, std::size_t);   \
  template QgmParams<T> make_qgm(CounterRng&, std::size_t, std::size_t, std::size_t);                  \
  template Tensor<T> coord_grid(std::size_t, std::size_t);                                             \
  template Tensor<T> fusion_neck(const FeaturePyramid<T>&, const NeckParams<T>&);                      \
  template QuerySet<T> qgm(const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>,          \
                           const QgmParams<T>&);

CRFORMER_INSTANTIATE_NECK(float)
CRFORMER_INSTANTIATE_NECK(double)

}  // namespace crformer
