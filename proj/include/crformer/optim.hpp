#pragma once

// Adam with bias-corrected moments.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "crformer/tensor.hpp"

namespace crformer {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

/// Updates params[i] in place from grads[i]. Moments are created on the first
/// call. Every gradient is checked before anything is modified; a non-finite
/// entry throws NumericError naming the parameter. Throws ContractError when
/// the lists disagree in length or extents.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const std::vector<T>> grads,
               std::span<const std::string> names, AdamState<T>& state, const AdamHyper& hyper);

}  // namespace crformer
