#pragma once

// Differentiable primitives. Every op validates extents, computes its result
// eagerly and, when any input is tracked, records its backward rule on the
// inputs' tape.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "crformer/tensor.hpp"

namespace crformer {

/// [m,k] x [k,n] -> [m,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// [m,k] x [n,k]^T -> [m,n].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

/// x[..., in] * w[in, out] (+ bias[out]). `bias` may be undefined.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);
/// x * s for a one-element tensor s (learnable gains).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s);

/// max(x, 0); the derivative at exactly 0 is taken as 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Softmax over the last axis with max subtraction. `keep` is empty (no mask),
/// one flag per last-axis position (shared by all rows), or one flag per
/// element. Masked entries come out as exactly 0. Throws DegenerateRowError
/// when a row keeps nothing.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, std::span<const std::uint8_t> keep = {});

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// Copies values into new extents (row-major order is kept).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// [m,n] -> [n,m].
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

/// Mean over `axis`; the axis is kept with extent 1.
template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis);

/// Sum of all elements as a [1] tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Half-open range [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Rows of table[V, C] selected by `ids` -> [ids.size(), C].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids);

/// Cross-correlation on x[H,W,Cin] with weight[k*k*Cin, Cout] laid out as
/// (ky, kx, cin) rows; zero padding `pad`, step `stride`.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t kernel,
                 std::size_t stride, std::size_t pad);

/// Per-position normalization over the last axis, then gain/offset.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& offset, double eps = 1e-5);

/// Non-overlapping 2x2 mean over [H,W,C]; H and W must be even.
template <typename T>
Tensor<T> avgpool2x2(const Tensor<T>& x);

/// Nearest-neighbour 2x upsampling of [H,W,C].
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x);

/// Depth-to-space: [H,W,f*f*C] -> [H*f, W*f, C], channel (dy*f+dx)*C+c feeds
/// sub-pixel (dy,dx).
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t factor);

/// Mean binary cross-entropy with logits, log-sum-exp stabilized. Targets are
/// constants.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

}  // namespace crformer
