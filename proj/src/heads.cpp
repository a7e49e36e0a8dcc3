#include "crformer/heads.hpp"

#include <cmath>

#include "crformer/error.hpp"
#include "crformer/instrument.hpp"
#include "crformer/ops.hpp"

namespace crformer {

template <typename T>
ProjectionChain<T> make_projection_chain(CounterRng& rng, std::size_t width) {
  return {make_linear<T>(rng, width, width), make_linear<T>(rng, width, width), make_linear<T>(rng, width, width)};
}

template <typename T>
HeadParams<T> make_heads(CounterRng& rng, std::size_t width, std::size_t stride, double mask_prior) {
  if (!(mask_prior > 0.0 && mask_prior < 1.0)) throw ConfigError("mask prior must lie in (0, 1)");
  HeadParams<T> p;
  p.mask = make_conv<T>(rng, 3, width, stride * stride);
  p.mask.bias = Tensor<T>::full({stride * stride}, static_cast<T>(std::log(mask_prior / (1.0 - mask_prior))));
  p.recon = make_projection_chain<T>(rng, width);
  p.text = make_projection_chain<T>(rng, width);
  p.stride = stride;
  return p;
}

template <typename T>
Tensor<T> project_chain(const ProjectionChain<T>& p, const Tensor<T>& x) {
  return linear(p.third, relu(linear(p.second, relu(linear(p.first, x)))));
}

template <typename T>
Tensor<T> mask_head(const Tensor<T>& grid, const HeadParams<T>& p) {
  if (grid.rank() != 3) throw DimensionError("mask_head: expected a [H,W,C] grid, got " + shape_str(grid.shape()));
  ScopedTag tag("mask_head");
  const Tensor<T> up = pixel_shuffle(conv(p.mask, grid), p.stride);
  return reshape(up, {up.dim(0), up.dim(1)});
}

template <typename T>
Tensor<T> reconstruct(const Tensor<T>& queries, const ProjectionChain<T>& p) {
  ScopedTag tag("recon");
  return mean(project_chain(p, queries), 0);
}

template <typename T>
Tensor<T> project_text(const Tensor<T>& words, const Tensor<T>& global, std::size_t length,
                       const ProjectionChain<T>& p) {
  if (length == 0 || length > words.dim(0)) throw ContractError("project_text: invalid token length");
  ScopedTag tag("recon");
  const Tensor<T> rows = concat<T>({slice(words, 0, 0, length), global}, 0);
  return mean(relu(project_chain(p, rows)), 0);
}

template <typename T>
Tensor<T> recon_loss(const Tensor<T>& reconstructed, const Tensor<T>& projected) {
  if (reconstructed.shape() != projected.shape()) {
    throw DimensionError("recon_loss: " + shape_str(reconstructed.shape()) + " vs " + shape_str(projected.shape()));
  }
  ScopedTag tag("recon");
  const Tensor<T> diff = sub(reconstructed, projected);
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(diff.numel()));
}

template <typename T>
Tensor<T> seg_loss(const Tensor<T>& logits, const Tensor<T>& gt) {
  if (logits.shape() != gt.shape()) {
    throw DimensionError("seg_loss: logits " + shape_str(logits.shape()) + " vs mask " + shape_str(gt.shape()));
  }
  return bce_with_logits(logits, gt);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& seg, const Tensor<T>& recon, const LossWeights& weights) {
  if (weights.seg < 0 || weights.recon < 0) throw ContractError("loss weights must be non-negative");
  return add(scale(seg, weights.seg), scale(recon, weights.recon));
}

#define CRFORMER_INSTANTIATE_HEADS(T)                                                                  \
  template ProjectionChain<T> make_projection_chain(CounterRng&, std::size_t);                         \
  template HeadParams<T> make_heads(CounterRng&, std::size_t, std::size_t, double);                       \
  template Tensor<T> project_chain(const ProjectionChain<T>&, const Tensor<T>&);                        \
  template Tensor<T> mask_head(const Tensor<T>&, const HeadParams<T>&);                                \
  template Tensor<T> reconstruct(const Tensor<T>&, const ProjectionChain<T>&);                          \
  template Tensor<T> project_text(const Tensor<T>&, const Tensor<T>&, std::size_t,                     \
                                  const ProjectionChain<T>&);                                          \
  template Tensor<T> recon_loss(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> seg_loss(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, const LossWeights&);

CRFORMER_INSTANTIATE_HEADS(float)
CRFORMER_INSTANTIATE_HEADS(double)

}  // namespace crformer
