#pragma once

#include <Eigen/Core>
#include <cstddef>

namespace crformer::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

/// C (+)= op(A) * op(B) with row-major operands. A is m x k after op, B is
/// k x n after op.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  MutMap<T> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
  } else if (trans_a && !trans_b) {
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, K, N);
  } else {
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, N, K).transpose();
  }
}

}  // namespace crformer::kernels
