#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "crformer/tensor.hpp"

namespace crformer {

/// Worst coordinate of one parameter tensor.
struct ParamGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::vector<std::size_t> worst_index;
  double analytic = 0.0;
  double numeric = 0.0;
  bool pass = true;
};

struct GradReport {
  std::vector<ParamGradError> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = true;
};

/// Scalar objective over a list of parameter tensors.
template <typename T>
using ScalarFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

/// Compares reverse-mode gradients of `f` against central differences
/// (f(p+h) - f(p-h)) / 2h for every coordinate of every parameter. Relative
/// error uses max(|analytic|, |numeric|, 1e-8) as denominator; a parameter
/// passes when its worst relative error is below `tol`.
///
/// Throws ContractError if h <= 0 and NumericError if f evaluates to a
/// non-finite value.
template <typename T>
GradReport finite_diff_check(const ScalarFn<T>& f, const std::vector<Tensor<T>>& params, double h, double tol,
                             const std::vector<std::string>& names = {});

}  // namespace crformer
