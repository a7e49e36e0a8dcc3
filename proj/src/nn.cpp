#include "crformer/nn.hpp"

#include <cmath>
#include <vector>

#include "crformer/error.hpp"
#include "crformer/ops.hpp"

namespace crformer {
namespace {

template <typename T>
Tensor<T> glorot(CounterRng& rng, Shape shape, double fan_in, double fan_out) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<T> v(numel(shape));
  for (auto& e : v) e = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace

template <typename T>
Linear<T> make_linear(CounterRng& rng, std::size_t in, std::size_t out, bool bias) {
  Linear<T> p;
  p.weight = glorot<T>(rng, {in, out}, static_cast<double>(in), static_cast<double>(out));
  if (bias) p.bias = Tensor<T>(Shape{out});
  return p;
}

template <typename T>
Conv<T> make_conv(CounterRng& rng, std::size_t kernel, std::size_t cin, std::size_t cout, std::size_t stride) {
  Conv<T> p;
  const double area = static_cast<double>(kernel * kernel);
  p.weight = glorot<T>(rng, {kernel * kernel * cin, cout}, area * static_cast<double>(cin),
                       area * static_cast<double>(cout));
  p.bias = Tensor<T>(Shape{cout});
  p.kernel = kernel;
  p.stride = stride;
  return p;
}

template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t width) {
  return {Tensor<T>::full({width}, T(1)), Tensor<T>(Shape{width})};
}

template <typename T>
Attention<T> make_attention(CounterRng& rng, std::size_t width, std::size_t heads) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  Attention<T> p;
  p.query = make_linear<T>(rng, width, width);
  p.key = make_linear<T>(rng, width, width, false);
  p.value = make_linear<T>(rng, width, width);
  p.out = make_linear<T>(rng, width, width);
  p.heads = heads;
  return p;
}

template <typename T>
Mlp<T> make_mlp(CounterRng& rng, std::size_t width, std::size_t hidden) {
  return {make_linear<T>(rng, width, hidden), make_linear<T>(rng, hidden, width)};
}

template <typename T>
Tensor<T> linear(const Linear<T>& p, const Tensor<T>& x) {
  return affine(x, p.weight, p.bias);
}

template <typename T>
Tensor<T> conv(const Conv<T>& p, const Tensor<T>& x) {
  return conv2d(x, p.weight, p.bias, p.kernel, p.stride, p.kernel / 2);
}

template <typename T>
Tensor<T> layernorm(const LayerNormParams<T>& p, const Tensor<T>& x) {
  return layer_norm(x, p.gain, p.offset);
}

template <typename T>
Tensor<T> mlp(const Mlp<T>& p, const Tensor<T>& x) {
  return linear(p.out, relu(linear(p.hidden, x)));
}

template <typename T>
Tensor<T> mhca(const Attention<T>& p, const Tensor<T>& q_in, const Tensor<T>& kv_in,
               std::span<const std::uint8_t> keep) {
  const std::size_t width = p.width();
  if (p.heads == 0 || width % p.heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " is not divisible by " +
                      std::to_string(p.heads) + " heads");
  }
  if (q_in.rank() != 2 || kv_in.rank() != 2 || q_in.dim(1) != p.query.in() || kv_in.dim(1) != p.key.in()) {
    throw DimensionError("attention: inputs " + shape_str(q_in.shape()) + " and " + shape_str(kv_in.shape()) +
                         " do not match width " + std::to_string(p.query.in()));
  }
  const Tensor<T> q = linear(p.query, q_in);
  const Tensor<T> k = linear(p.key, kv_in);
  const Tensor<T> v = linear(p.value, kv_in);
  const std::size_t dh = p.head_width();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor<T>> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const auto lo = h * dh, hi = lo + dh;
    const Tensor<T> qh = p.heads == 1 ? q : slice(q, 1, lo, hi);
    const Tensor<T> kh = p.heads == 1 ? k : slice(k, 1, lo, hi);
    const Tensor<T> vh = p.heads == 1 ? v : slice(v, 1, lo, hi);
    const Tensor<T> weights = softmax_lastdim(scale(matmul_nt(qh, kh), inv_sqrt), keep);
    heads.push_back(matmul(weights, vh));
  }
  return linear(p.out, p.heads == 1 ? heads.front() : concat(heads, 1));
}

template <typename T>
Tensor<T> sine_positional_1d(std::size_t length, std::size_t width) {
  if (width == 0 || width % 2 != 0) {
    throw ConfigError("1D positional width must be even, got " + std::to_string(width));
  }
  std::vector<T> v(length * width);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < width / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * freq;
      v[pos * width + 2 * i] = static_cast<T>(std::sin(angle));
      v[pos * width + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>({length, width}, std::move(v));
}

template <typename T>
Tensor<T> sine_positional_2d(std::size_t rows, std::size_t cols, std::size_t width) {
  if (width == 0 || width % 4 != 0) {
    throw ConfigError("2D positional width must be divisible by 4, got " + std::to_string(width));
  }
  const std::size_t half = width / 2;
  const auto row_bank = sine_positional_1d<T>(rows, half);
  const auto col_bank = sine_positional_1d<T>(cols, half);
  std::vector<T> v(rows * cols * width);
  for (std::size_t y = 0; y < rows; ++y) {
    for (std::size_t x = 0; x < cols; ++x) {
      T* dst = v.data() + (y * cols + x) * width;
      for (std::size_t c = 0; c < half; ++c) {
        dst[c] = row_bank[y * half + c];
        dst[half + c] = col_bank[x * half + c];
      }
    }
  }
  return Tensor<T>({rows, cols, width}, std::move(v));
}

#define CRFORMER_INSTANTIATE_NN(T)                                                                  \
  template Linear<T> make_linear(CounterRng&, std::size_t, std::size_t, bool);                      \
  template Conv<T> make_conv(CounterRng&, std::size_t, std::size_t, std::size_t, std::size_t);      \
  template LayerNormParams<T> make_layer_norm(std::size_t);                                         \
  template Attention<T> make_attention(CounterRng&, std::size_t, std::size_t);                      \
  template Mlp<T> make_mlp(CounterRng&, std::size_t, std::size_t);                                  \
  template Tensor<T> linear(const Linear<T>&, const Tensor<T>&);                                    \
  template Tensor<T> conv(const Conv<T>&, const Tensor<T>&);                                        \
  template Tensor<T> layernorm(const LayerNormParams<T>&, const Tensor<T>&);                        \
  template Tensor<T> mlp(const Mlp<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mhca(const Attention<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                          std::span<const std::uint8_t>);                                           \
  template Tensor<T> sine_positional_1d(std::size_t, std::size_t);                                  \
  template Tensor<T> sine_positional_2d(std::size_t, std::size_t, std::size_t);

CRFORMER_INSTANTIATE_NN(float)
CRFORMER_INSTANTIATE_NN(double)

}  // namespace crformer
