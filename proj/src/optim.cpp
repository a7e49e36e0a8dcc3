#include "crformer/optim.hpp"

#include <cmath>

#include "crformer/error.hpp"

namespace crformer {

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const std::vector<T>> grads,
               std::span<const std::string> names, AdamState<T>& state, const AdamHyper& hyper) {
  if (grads.size() != params.size() || names.size() != params.size()) {
    throw ContractError("adam_step: parameter, gradient and name lists differ in length");
  }
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->numel(), T(0));
      state.v[i].assign(params[i]->numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: moment state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i]->numel() || state.m[i].size() != params[i]->numel()) {
      throw ContractError("adam_step: extent mismatch for '" + names[i] + "'");
    }
    for (std::size_t k = 0; k < grads[i].size(); ++k) {
      if (!std::isfinite(grads[i][k])) {
        throw NumericError("non-finite gradient in '" + names[i] + "' at flat index " + std::to_string(k));
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const double mhat = static_cast<double>(m[k]) / c1;
      const double vhat = static_cast<double>(v[k]) / c2;
      p[k] = static_cast<T>(static_cast<double>(p[k]) - hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps));
    }
  }
}

template void adam_step(std::span<Tensor<float>* const>, std::span<const std::vector<float>>,
                        std::span<const std::string>, AdamState<float>&, const AdamHyper&);
template void adam_step(std::span<Tensor<double>* const>, std::span<const std::vector<double>>,
                        std::span<const std::string>, AdamState<double>&, const AdamHyper&);

}  // namespace crformer
