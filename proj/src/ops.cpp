#include "crformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "crformer/error.hpp"
#include "crformer/instrument.hpp"
#include "kernels.hpp"

namespace crformer {
namespace {

template <typename T>
using Buf = std::shared_ptr<const std::vector<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Splits extents around `axis` into (outer, axis extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  kernels::gemm(a.data().data(), false, b.data().data(), false, out.data(), m, k, n, false);
  Buf<T> av = a.storage(), bv = b.storage();
  return record_op<T>("matmul", Tensor<T>({m, n}, std::move(out)), {&a, &b},
                      [av, bv, m, k, n](std::span<const T> g, std::vector<std::span<T>>& d) {
                        if (!d[0].empty()) kernels::gemm(g.data(), false, bv->data(), true, d[0].data(), m, n, k, true);
                        if (!d[1].empty()) kernels::gemm(av->data(), true, g.data(), false, d[1].data(), k, m, n, true);
                      });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul_nt");
  require_rank(b.shape(), 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner extents differ for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  kernels::gemm(a.data().data(), false, b.data().data(), true, out.data(), m, k, n, false);
  Buf<T> av = a.storage(), bv = b.storage();
  return record_op<T>("matmul_nt", Tensor<T>({m, n}, std::move(out)), {&a, &b},
                      [av, bv, m, k, n](std::span<const T> g, std::vector<std::span<T>>& d) {
                        if (!d[0].empty()) kernels::gemm(g.data(), false, bv->data(), false, d[0].data(), m, n, k, true);
                        if (!d[1].empty()) kernels::gemm(g.data(), true, av->data(), false, d[1].data(), n, m, k, true);
                      });
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(w.shape(), 2, "affine");
  if (x.rank() == 0 || x.shape().back() != w.dim(0)) {
    throw DimensionError("affine: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0), out_w = w.dim(1), rows = x.numel() / in;
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != out_w) {
    throw DimensionError("affine: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  std::vector<T> out(rows * out_w);
  kernels::gemm(x.data().data(), false, w.data().data(), false, out.data(), rows, in, out_w, false);
  if (has_bias) {
    auto b = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < out_w; ++j) out[r * out_w + j] += b[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = out_w;
  Buf<T> xv = x.storage(), wv = w.storage();
  std::vector<const Tensor<T>*> inputs{&x, &w};
  if (has_bias) inputs.push_back(&bias);
  return record_op<T>("affine", Tensor<T>(std::move(shape), std::move(out)), inputs,
                      [xv, wv, rows, in, out_w](std::span<const T> g, std::vector<std::span<T>>& d) {
                        if (!d[0].empty()) kernels::gemm(g.data(), false, wv->data(), true, d[0].data(), rows, out_w, in, true);
                        if (!d[1].empty()) kernels::gemm(xv->data(), true, g.data(), false, d[1].data(), in, rows, out_w, true);
                        if (d.size() > 2 && !d[2].empty()) {
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t j = 0; j < out_w; ++j) d[2][j] += g[r * out_w + j];
                          }
                        }
                      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return record_op<T>("add", Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                      [](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (auto& di : d) {
                          if (di.empty()) continue;
                          for (std::size_t i = 0; i < g.size(); ++i) di[i] += g[i];
                        }
                      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return record_op<T>("sub", Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                      [](std::span<const T> g, std::vector<std::span<T>>& d) {
                        if (!d[0].empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) d[0][i] += g[i];
                        }
                        if (!d[1].empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) d[1][i] -= g[i];
                        }
                      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Buf<T> av = a.storage(), bv = b.storage();
  return record_op<T>("mul", Tensor<T>(a.shape(), std::move(out)), {&a, &b},
                      [av, bv](std::span<const T> g, std::vector<std::span<T>>& d) {
                        if (!d[0].empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) d[0][i] += g[i] * (*bv)[i];
                        }
                        if (!d[1].empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) d[1][i] += g[i] * (*av)[i];
                        }
                      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  auto v = x.data();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * f;
  return record_op<T>("scale", Tensor<T>(x.shape(), std::move(out)), {&x},
                      [f](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t i = 0; i < g.size(); ++i) d[0][i] += g[i] * f;
                      });
}

template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: gain must have one element, got " + shape_str(s.shape()));
  const T f = s[0];
  auto v = x.data();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * f;
  Buf<T> xv = x.storage();
  return record_op<T>("scale_by", Tensor<T>(x.shape(), std::move(out)), {&x, &s},
                      [xv, f](std::span<const T> g, std::vector<std::span<T>>& d) {
                        if (!d[0].empty()) {
                          for (std::size_t i = 0; i < g.size(); ++i) d[0][i] += g[i] * f;
                        }
                        if (!d[1].empty()) {
                          T acc = 0;
                          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (*xv)[i];
                          d[1][0] += acc;
                        }
                      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto v = x.data();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > T(0) ? v[i] : T(0);
  Buf<T> xv = x.storage();
  return record_op<T>("relu", Tensor<T>(x.shape(), std::move(out)), {&x},
                      [xv](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if ((*xv)[i] > T(0)) d[0][i] += g[i];
                        }
                      });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, std::span<const std::uint8_t> keep) {
  if (x.rank() == 0) throw DimensionError("softmax_lastdim: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const bool per_element = keep.size() == x.numel() && keep.size() != n;
  if (!keep.empty() && keep.size() != n && keep.size() != x.numel()) {
    throw DimensionError("softmax_lastdim: mask of length " + std::to_string(keep.size()) +
                         " does not fit " + shape_str(x.shape()));
  }
  auto v = x.data();
  std::vector<T> out(v.size(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * n;
    T* o = out.data() + r * n;
    auto kept = [&](std::size_t j) {
      if (keep.empty()) return true;
      return keep[per_element ? r * n + j : j] != 0;
    };
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (kept(j)) {
        mx = std::max(mx, in[j]);
        any = true;
      }
    }
    if (!any) throw DegenerateRowError("softmax_lastdim: row " + std::to_string(r) + " is fully masked");
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (kept(j)) {
        o[j] = std::exp(in[j] - mx);
        total += o[j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  if (detail::softmax_observed()) {
    SoftmaxEvent ev;
    ev.rows = rows;
    ev.cols = n;
    ev.probs.assign(out.begin(), out.end());
    if (!keep.empty()) {
      if (per_element) {
        ev.keep.assign(keep.begin(), keep.end());
      } else {
        ev.keep.reserve(rows * n);
        for (std::size_t r = 0; r < rows; ++r) ev.keep.insert(ev.keep.end(), keep.begin(), keep.end());
      }
    }
    detail::notify_softmax(std::move(ev));
  }
  auto y = std::make_shared<const std::vector<T>>(out);
  return record_op<T>("softmax", Tensor<T>(x.shape(), std::move(out)), {&x},
                      [y, rows, n](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t r = 0; r < rows; ++r) {
                          const T* yr = y->data() + r * n;
                          const T* gr = g.data() + r * n;
                          T dot = 0;
                          for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
                          for (std::size_t j = 0; j < n; ++j) d[0][r * n + j] += yr[j] * (gr[j] - dot);
                        }
                      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    shape[axis] += s[axis];
    widths.push_back(split_axis(s, axis).extent * split_axis(s, axis).inner);
  }
  const auto sp = split_axis(shape, axis);
  const std::size_t row = sp.extent * sp.inner;
  std::vector<T> out(numel(shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto v = parts[p].data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(v.data() + o * widths[p], widths[p], out.data() + o * row + offset);
    }
    offset += widths[p];
  }
  std::vector<const Tensor<T>*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  const std::size_t outer = sp.outer;
  return record_op<T>("concat", Tensor<T>(std::move(shape), std::move(out)), inputs,
                      [widths, outer, row](std::span<const T> g, std::vector<std::span<T>>& d) {
                        std::size_t off = 0;
                        for (std::size_t p = 0; p < widths.size(); ++p) {
                          if (!d[p].empty()) {
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t j = 0; j < widths[p]; ++j) d[p][o * widths[p] + j] += g[o * row + off + j];
                            }
                          }
                          off += widths[p];
                        }
                      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return record_op<T>("reshape", Tensor<T>(std::move(shape), x.to_vector()), {&x},
                      [](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t i = 0; i < g.size(); ++i) d[0][i] += g[i];
                      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank(x.shape(), 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto v = x.data();
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  }
  return record_op<T>("transpose", Tensor<T>({n, m}, std::move(out)), {&x},
                      [m, n](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t i = 0; i < m; ++i) {
                          for (std::size_t j = 0; j < n; ++j) d[0][i * n + j] += g[j * m + i];
                        }
                      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("mean: axis out of range for " + shape_str(x.shape()));
  const auto sp = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = 1;
  auto v = x.data();
  std::vector<long double> acc(sp.outer * sp.inner, 0.0L);
  const T inv = T(1) / static_cast<T>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t e = 0; e < sp.extent; ++e) {
      const T* src = v.data() + (o * sp.extent + e) * sp.inner;
      long double* dst = acc.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  std::vector<T> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i] / static_cast<long double>(sp.extent));
  return record_op<T>("mean", Tensor<T>(std::move(shape), std::move(out)), {&x},
                      [sp, inv](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t o = 0; o < sp.outer; ++o) {
                          for (std::size_t e = 0; e < sp.extent; ++e) {
                            for (std::size_t i = 0; i < sp.inner; ++i) {
                              d[0][(o * sp.extent + e) * sp.inner + i] += g[o * sp.inner + i] * inv;
                            }
                          }
                        }
                      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  long double total = 0;
  for (auto e : x.data()) total += e;
  return record_op<T>("sum", Tensor<T>::scalar(static_cast<T>(total)), {&x},
                      [](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (auto& e : d[0]) e += g[0];
                      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const auto sp = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * sp.inner;
  auto v = x.data();
  std::vector<T> out(sp.outer * chunk);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(v.data() + (o * sp.extent + begin) * sp.inner, chunk, out.data() + o * chunk);
  }
  return record_op<T>("slice", Tensor<T>(std::move(shape), std::move(out)), {&x},
                      [sp, begin, chunk](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t o = 0; o < sp.outer; ++o) {
                          T* dst = d[0].data() + (o * sp.extent + begin) * sp.inner;
                          for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[o * chunk + i];
                        }
                      });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
  require_rank(table.shape(), 2, "gather_rows");
  if (ids.empty()) throw DimensionError("gather_rows: no ids");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  auto v = table.data();
  std::vector<T> out(ids.size() * width);
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[r]) + " outside table of " + std::to_string(vocab));
    }
    rows.push_back(static_cast<std::size_t>(ids[r]));
    std::copy_n(v.data() + rows.back() * width, width, out.data() + r * width);
  }
  return record_op<T>("gather_rows", Tensor<T>({ids.size(), width}, std::move(out)), {&table},
                      [rows, width](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t r = 0; r < rows.size(); ++r) {
                          for (std::size_t j = 0; j < width; ++j) d[0][rows[r] * width + j] += g[r * width + j];
                        }
                      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t kernel,
                 std::size_t stride, std::size_t pad) {
  require_rank(x.shape(), 3, "conv2d");
  require_rank(weight.shape(), 2, "conv2d weight");
  if (kernel == 0 || stride == 0) throw ConfigError("conv2d: kernel and stride must be positive");
  const std::size_t H = x.dim(0), W = x.dim(1), cin = x.dim(2);
  if (weight.dim(0) != kernel * kernel * cin) {
    throw DimensionError("conv2d: input channels " + std::to_string(cin) + " do not match weight " +
                         shape_str(weight.shape()) + " for kernel " + std::to_string(kernel));
  }
  if (H + 2 * pad < kernel || W + 2 * pad < kernel) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
  }
  const std::size_t cout = weight.dim(1);
  if (bias.defined() && bias.numel() != cout) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) +
                         " output channels");
  }
  const std::size_t Ho = (H + 2 * pad - kernel) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kernel) / stride + 1;
  const std::size_t K = kernel * kernel * cin;
  const std::size_t P = Ho * Wo;
  const bool direct = kernel == 1 && stride == 1 && pad == 0;

  std::shared_ptr<const std::vector<T>> cols;
  if (direct) {
    cols = x.storage();
  } else {
    auto buf = std::make_shared<std::vector<T>>(P * K, T(0));
    auto v = x.data();
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T* row = buf->data() + (oy * Wo + ox) * K;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            std::copy_n(v.data() + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * cin, cin,
                        row + (ky * kernel + kx) * cin);
          }
        }
      }
    }
    cols = std::move(buf);
  }

  std::vector<T> out(P * cout);
  kernels::gemm(cols->data(), false, weight.data().data(), false, out.data(), P, K, cout, false);
  if (bias.defined()) {
    auto b = bias.data();
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t c = 0; c < cout; ++c) out[p * cout + c] += b[c];
    }
  }
  Buf<T> wv = weight.storage();
  std::vector<const Tensor<T>*> inputs{&x, &weight};
  if (bias.defined()) inputs.push_back(&bias);
  return record_op<T>(
      "conv2d", Tensor<T>({Ho, Wo, cout}, std::move(out)), inputs,
      [cols, wv, H, W, cin, cout, Ho, Wo, K, P, kernel, stride, pad, direct](std::span<const T> g,
                                                                              std::vector<std::span<T>>& d) {
        if (!d[1].empty()) kernels::gemm(cols->data(), true, g.data(), false, d[1].data(), K, P, cout, true);
        if (d.size() > 2 && !d[2].empty()) {
          for (std::size_t p = 0; p < P; ++p) {
            for (std::size_t c = 0; c < cout; ++c) d[2][c] += g[p * cout + c];
          }
        }
        if (d[0].empty()) return;
        if (direct) {
          kernels::gemm(g.data(), false, wv->data(), true, d[0].data(), P, cout, K, true);
          return;
        }
        std::vector<T> dcols(P * K);
        kernels::gemm(g.data(), false, wv->data(), true, dcols.data(), P, cout, K, false);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const T* row = dcols.data() + (oy * Wo + ox) * K;
            for (std::size_t ky = 0; ky < kernel; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < kernel; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                T* dst = d[0].data() + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * cin;
                const T* src = row + (ky * kernel + kx) * cin;
                for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& offset, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t C = x.shape().back();
  if (C < 2) throw DimensionError("layer_norm: needs at least 2 channels, got " + shape_str(x.shape()));
  if (gain.numel() != C || offset.numel() != C) {
    throw DimensionError("layer_norm: gain/offset " + shape_str(gain.shape()) + "/" + shape_str(offset.shape()) +
                         " do not match " + std::to_string(C) + " channels");
  }
  const std::size_t rows = x.numel() / C;
  auto v = x.data();
  auto gn = gain.data(), of = offset.data();
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * C;
    T mu = 0;
    for (std::size_t c = 0; c < C; ++c) mu += in[c];
    mu /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<T>(C);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < C; ++c) {
      const T h = (in[c] - mu) * rs;
      (*xhat)[r * C + c] = h;
      out[r * C + c] = h * gn[c] + of[c];
    }
  }
  Buf<T> gv = gain.storage();
  return record_op<T>("layer_norm", Tensor<T>(x.shape(), std::move(out)), {&x, &gain, &offset},
                      [xhat, rstd, gv, rows, C](std::span<const T> g, std::vector<std::span<T>>& d) {
                        std::vector<T> dh(C);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const T* gr = g.data() + r * C;
                          const T* hr = xhat->data() + r * C;
                          if (!d[1].empty()) {
                            for (std::size_t c = 0; c < C; ++c) d[1][c] += gr[c] * hr[c];
                          }
                          if (!d[2].empty()) {
                            for (std::size_t c = 0; c < C; ++c) d[2][c] += gr[c];
                          }
                          if (d[0].empty()) continue;
                          T m1 = 0, m2 = 0;
                          for (std::size_t c = 0; c < C; ++c) {
                            dh[c] = gr[c] * (*gv)[c];
                            m1 += dh[c];
                            m2 += dh[c] * hr[c];
                          }
                          m1 /= static_cast<T>(C);
                          m2 /= static_cast<T>(C);
                          for (std::size_t c = 0; c < C; ++c) d[0][r * C + c] += (*rstd)[r] * (dh[c] - m1 - hr[c] * m2);
                        }
                      });
}

template <typename T>
Tensor<T> avgpool2x2(const Tensor<T>& x) {
  require_rank(x.shape(), 3, "avgpool2x2");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (H % 2 || W % 2) throw DimensionError("avgpool2x2: extents must be even, got " + shape_str(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  auto v = x.data();
  std::vector<T> out(Ho * Wo * C, T(0));
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t xx = 0; xx < W; ++xx) {
      T* dst = out.data() + ((y / 2) * Wo + xx / 2) * C;
      const T* src = v.data() + (y * W + xx) * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
    }
  }
  for (auto& e : out) e *= T(0.25);
  return record_op<T>("avgpool2x2", Tensor<T>({Ho, Wo, C}, std::move(out)), {&x},
                      [H, W, Wo, C](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t y = 0; y < H; ++y) {
                          for (std::size_t xx = 0; xx < W; ++xx) {
                            const T* src = g.data() + ((y / 2) * Wo + xx / 2) * C;
                            T* dst = d[0].data() + (y * W + xx) * C;
                            for (std::size_t c = 0; c < C; ++c) dst[c] += T(0.25) * src[c];
                          }
                        }
                      });
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  require_rank(x.shape(), 3, "upsample2x");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  auto v = x.data();
  std::vector<T> out(Ho * Wo * C);
  for (std::size_t y = 0; y < Ho; ++y) {
    for (std::size_t xx = 0; xx < Wo; ++xx) {
      std::copy_n(v.data() + ((y / 2) * W + xx / 2) * C, C, out.data() + (y * Wo + xx) * C);
    }
  }
  return record_op<T>("upsample2x", Tensor<T>({Ho, Wo, C}, std::move(out)), {&x},
                      [W, Ho, Wo, C](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t y = 0; y < Ho; ++y) {
                          for (std::size_t xx = 0; xx < Wo; ++xx) {
                            const T* src = g.data() + (y * Wo + xx) * C;
                            T* dst = d[0].data() + ((y / 2) * W + xx / 2) * C;
                            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
                          }
                        }
                      });
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t factor) {
  require_rank(x.shape(), 3, "pixel_shuffle");
  if (factor == 0 || x.dim(2) % (factor * factor)) {
    throw DimensionError("pixel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by factor^2");
  }
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2) / (factor * factor);
  const std::size_t Ho = H * factor, Wo = W * factor;
  // out index -> in index
  auto map = std::make_shared<std::vector<std::size_t>>(Ho * Wo * C);
  for (std::size_t y = 0; y < Ho; ++y) {
    for (std::size_t xx = 0; xx < Wo; ++xx) {
      const std::size_t sub = (y % factor) * factor + xx % factor;
      for (std::size_t c = 0; c < C; ++c) {
        (*map)[(y * Wo + xx) * C + c] = ((y / factor) * W + xx / factor) * (factor * factor * C) + sub * C + c;
      }
    }
  }
  auto v = x.data();
  std::vector<T> out(map->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[(*map)[i]];
  return record_op<T>("pixel_shuffle", Tensor<T>({Ho, Wo, C}, std::move(out)), {&x},
                      [map](std::span<const T> g, std::vector<std::span<T>>& d) {
                        for (std::size_t i = 0; i < g.size(); ++i) d[0][(*map)[i]] += g[i];
                      });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  require_same(logits.shape(), targets.shape(), "bce_with_logits");
  auto z = logits.data(), y = targets.data();
  const std::size_t n = z.size();
  long double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += std::max(z[i], T(0)) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  Buf<T> zv = logits.storage(), yv = targets.storage();
  return record_op<T>("bce_with_logits", Tensor<T>::scalar(static_cast<T>(total / static_cast<long double>(n))), {&logits},
                      [zv, yv, n](std::span<const T> g, std::vector<std::span<T>>& d) {
                        const T s = g[0] / static_cast<T>(n);
                        for (std::size_t i = 0; i < n; ++i) {
                          const T zi = (*zv)[i];
                          const T p = zi >= 0 ? T(1) / (T(1) + std::exp(-zi)) : std::exp(zi) / (T(1) + std::exp(zi));
                          d[0][i] += s * (p - (*yv)[i]);
                        }
                      });
}

#define CRFORMER_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale(const Tensor<T>&, double);                                                 \
  template Tensor<T> scale_by(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                          \
  template Tensor<T> softmax_lastdim(const Tensor<T>&, std::span<const std::uint8_t>);                \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
  template Tensor<T> transpose(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                           \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                  \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const int>);                             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,        \
                            std::size_t, std::size_t);                                                \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);        \
  template Tensor<T> avgpool2x2(const Tensor<T>&);                                                    \
  template Tensor<T> upsample2x(const Tensor<T>&);                                                    \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);

CRFORMER_INSTANTIATE_OPS(float)
CRFORMER_INSTANTIATE_OPS(double)

}  // namespace crformer
