#pragma once

// Segmentation head, language reconstruction branch and the training losses.

#include <cstddef>
#include <string>

#include "crformer/nn.hpp"
#include "crformer/tensor.hpp"

namespace crformer {

/// Three linear maps with relu after the first two.
template <typename T>
struct ProjectionChain {
  Linear<T> first, second, third;
};

template <typename T>
struct HeadParams {
  Conv<T> mask;  // 3x3, C -> stride^2 sub-pixel logits
  ProjectionChain<T> recon;
  ProjectionChain<T> text;
  std::size_t stride = 8;
};

/// The mask bias starts at the logit of `mask_prior`, the expected
/// foreground fraction.
template <typename T>
HeadParams<T> make_heads(CounterRng& rng, std::size_t width, std::size_t stride, double mask_prior = 0.05);
template <typename T>
ProjectionChain<T> make_projection_chain(CounterRng& rng, std::size_t width);

template <typename T>
Tensor<T> project_chain(const ProjectionChain<T>& p, const Tensor<T>& x);

/// grid[H_v, W_v, C] -> logits[H_v*stride, W_v*stride]. A 3x3 convolution
/// produces stride^2 logits per cell that are rearranged to sub-pixels.
template <typename T>
Tensor<T> mask_head(const Tensor<T>& grid, const HeadParams<T>& p);

/// Mean over the query axis of the projected final queries -> [1, C].
template <typename T>
Tensor<T> reconstruct(const Tensor<T>& queries, const ProjectionChain<T>& p);

/// Mean over [unpadded words; global] rows of relu(projected rows) -> [1, C].
template <typename T>
Tensor<T> project_text(const Tensor<T>& words, const Tensor<T>& global, std::size_t length,
                       const ProjectionChain<T>& p);

/// Mean squared difference over the feature axis.
template <typename T>
Tensor<T> recon_loss(const Tensor<T>& reconstructed, const Tensor<T>& projected);

/// Mean per-pixel binary cross-entropy of logits[H, W] against a 0/1 mask.
template <typename T>
Tensor<T> seg_loss(const Tensor<T>& logits, const Tensor<T>& gt);

struct LossWeights {
  double seg = 1.0;
  double recon = 0.1;
};

/// weights.seg * seg + weights.recon * recon. Throws ContractError for
/// negative weights.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& seg, const Tensor<T>& recon, const LossWeights& weights);

template <typename T, typename F>
void visit_params(const std::string& prefix, ProjectionChain<T>& p, F&& f) {
  visit_params(prefix + ".first", p.first, f);
  visit_params(prefix + ".second", p.second, f);
  visit_params(prefix + ".third", p.third, f);
}

template <typename T, typename F>
void visit_params(const std::string& prefix, HeadParams<T>& p, F&& f) {
  visit_params(prefix + ".mask", p.mask, f);
  visit_params(prefix + ".recon", p.recon, f);
  visit_params(prefix + ".text", p.text, f);
}

}  // namespace crformer
