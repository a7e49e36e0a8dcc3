#pragma once

// Parameterized building blocks: linear maps, convolutions, layer norm,
// multi-head attention, the two-layer MLP and sinusoidal position banks.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "crformer/rng.hpp"
#include "crformer/tensor.hpp"

namespace crformer {

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], may be undefined

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
};

/// Square-kernel convolution; padding is kernel / 2 so stride 1 keeps extents.
template <typename T>
struct Conv {
  Tensor<T> weight;  // [kernel * kernel * cin, cout]
  Tensor<T> bias;    // [cout]
  std::size_t kernel = 1;
  std::size_t stride = 1;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> offset;
};

template <typename T>
struct Attention {
  Linear<T> query, key, value, out;
  std::size_t heads = 1;

  std::size_t width() const { return query.out(); }
  std::size_t head_width() const { return width() / heads; }
};

template <typename T>
struct Mlp {
  Linear<T> hidden;
  Linear<T> out;
};

// Glorot-uniform weights, zero biases.
template <typename T>
Linear<T> make_linear(CounterRng& rng, std::size_t in, std::size_t out, bool bias = true);
template <typename T>
Conv<T> make_conv(CounterRng& rng, std::size_t kernel, std::size_t cin, std::size_t cout, std::size_t stride = 1);
template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t width);
/// Throws ConfigError unless heads >= 1 and heads divides width.
template <typename T>
Attention<T> make_attention(CounterRng& rng, std::size_t width, std::size_t heads);
template <typename T>
Mlp<T> make_mlp(CounterRng& rng, std::size_t width, std::size_t hidden);

template <typename T>
Tensor<T> linear(const Linear<T>& p, const Tensor<T>& x);
template <typename T>
Tensor<T> conv(const Conv<T>& p, const Tensor<T>& x);
template <typename T>
Tensor<T> layernorm(const LayerNormParams<T>& p, const Tensor<T>& x);
/// relu between the two layers.
template <typename T>
Tensor<T> mlp(const Mlp<T>& p, const Tensor<T>& x);

/// Multi-head scaled dot-product attention (scale 1/sqrt(head width)) of
/// q_in[S,C] over kv_in[M,C], concatenated and out-projected. `keep` masks
/// keys (one flag per kv row, empty for none). No residual.
template <typename T>
Tensor<T> mhca(const Attention<T>& p, const Tensor<T>& q_in, const Tensor<T>& kv_in,
               std::span<const std::uint8_t> keep = {});

template <typename T>
Tensor<T> mhsa(const Attention<T>& p, const Tensor<T>& x, std::span<const std::uint8_t> keep = {}) {
  return mhca(p, x, x, keep);
}

/// [length, width] bank: column 2i holds sin(pos / 10000^(2i/width)),
/// column 2i+1 the matching cos. Throws ConfigError for odd width.
template <typename T>
Tensor<T> sine_positional_1d(std::size_t length, std::size_t width);

/// [rows, cols, width]: first width/2 channels are the 1D bank over the row
/// index, the rest the 1D bank over the column index. width % 4 == 0.
template <typename T>
Tensor<T> sine_positional_2d(std::size_t rows, std::size_t cols, std::size_t width);

template <typename T, typename F>
void visit_params(const std::string& prefix, Linear<T>& p, F&& f) {
  f(prefix + ".weight", p.weight);
  if (p.bias.defined()) f(prefix + ".bias", p.bias);
}

template <typename T, typename F>
void visit_params(const std::string& prefix, Conv<T>& p, F&& f) {
  f(prefix + ".weight", p.weight);
  if (p.bias.defined()) f(prefix + ".bias", p.bias);
}

template <typename T, typename F>
void visit_params(const std::string& prefix, LayerNormParams<T>& p, F&& f) {
  f(prefix + ".gain", p.gain);
  f(prefix + ".offset", p.offset);
}

template <typename T, typename F>
void visit_params(const std::string& prefix, Attention<T>& p, F&& f) {
  visit_params(prefix + ".query", p.query, f);
  visit_params(prefix + ".key", p.key, f);
  visit_params(prefix + ".value", p.value, f);
  visit_params(prefix + ".out", p.out, f);
}

template <typename T, typename F>
void visit_params(const std::string& prefix, Mlp<T>& p, F&& f) {
  visit_params(prefix + ".hidden", p.hidden, f);
  visit_params(prefix + ".out", p.out, f);
}

}  // namespace crformer
