#pragma once

// Fusion neck (pyramid -> single grid with coordinate channels) and the query
// generation module.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "crformer/encoders.hpp"
#include "crformer/nn.hpp"
#include "crformer/tensor.hpp"

namespace crformer {

template <typename T>
struct NeckParams {
  Linear<T> v4;  // C4 -> C
  Linear<T> m4;  // C -> C
  Linear<T> v3;  // C3 -> C
  Linear<T> m3;  // 2C -> C
  Linear<T> v2;  // C2 -> C
  Conv<T> aggregate;   // 1x1, 5C -> C
  Conv<T> coord_fuse;  // 1x1, C + 2 -> C
};

/// Query generation: scores between grid-derived query rows and words,
/// softmax over unpadded words, queries as weighted sums of projected words.
template <typename T>
struct QgmParams {
  Conv<T> reduce;        // 3x3, C -> N_q
  Linear<T> grid_proj;   // H_g*W_g -> C
  Linear<T> word_proj;   // C -> C
  Linear<T> value_proj;  // C -> C
};

template <typename T>
struct QuerySet {
  Tensor<T> queries;    // [N_q, C]
  Tensor<T> attention;  // [N_q, L_max]
};

template <typename T>
NeckParams<T> make_neck(CounterRng& rng, std::size_t width, std::size_t c2, std::size_t c3, std::size_t c4);
template <typename T>
QgmParams<T> make_qgm(CounterRng& rng, std::size_t width, std::size_t num_queries, std::size_t grid_cells);

/// [rows, cols, 2]: channel 0 is x, channel 1 is y, each spread linearly over
/// [-1, 1]; a single row or column sits at 0.
template <typename T>
Tensor<T> coord_grid(std::size_t rows, std::size_t cols);

/// Fuses the pyramid at stage-3 resolution into F_v[H3, W3, C]. Throws
/// DimensionError when stage extents are not consecutive halvings.
template <typename T>
Tensor<T> fusion_neck(const FeaturePyramid<T>& pyramid, const NeckParams<T>& p);

/// grid[H_g, W_g, C], words[L_max, C]. Throws DegenerateRowError when every
/// word is masked.
template <typename T>
QuerySet<T> qgm(const Tensor<T>& grid, const Tensor<T>& words, std::span<const std::uint8_t> keep,
                const QgmParams<T>& p);

template <typename T, typename F>
void visit_params(const std::string& prefix, NeckParams<T>& p, F&& f) {
  visit_params(prefix + ".v4", p.v4, f);
  visit_params(prefix + ".m4", p.m4, f);
  visit_params(prefix + ".v3", p.v3, f);
  visit_params(prefix + ".m3", p.m3, f);
  visit_params(prefix + ".v2", p.v2, f);
  visit_params(prefix + ".aggregate", p.aggregate, f);
  visit_params(prefix + ".coord_fuse", p.coord_fuse, f);
}

template <typename T, typename F>
void visit_params(const std::string& prefix, QgmParams<T>& p, F&& f) {
  visit_params(prefix + ".reduce", p.reduce, f);
  visit_params(prefix + ".grid_proj", p.grid_proj, f);
  visit_params(prefix + ".word_proj", p.word_proj, f);
  visit_params(prefix + ".value_proj", p.value_proj, f);
}

}  // namespace crformer
