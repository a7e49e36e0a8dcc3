#include "crformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "crformer/error.hpp"

namespace crformer {
namespace {

template <typename T>
double evaluate(const ScalarFn<T>& f, const std::vector<Tensor<T>>& params) {
  const Tensor<T> out = f(params);
  if (out.numel() != 1) throw ContractError("finite_diff_check: objective must return one element");
  const double v = static_cast<double>(out.item());
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: objective evaluated to a non-finite value");
  return v;
}

std::vector<std::size_t> unravel(std::size_t flat, const Shape& shape) {
  std::vector<std::size_t> idx(shape.size());
  for (std::size_t i = shape.size(); i-- > 0;) {
    idx[i] = flat % shape[i];
    flat /= shape[i];
  }
  return idx;
}

}  // namespace

template <typename T>
GradReport finite_diff_check(const ScalarFn<T>& f, const std::vector<Tensor<T>>& params, double h, double tol,
                             const std::vector<std::string>& names) {
  if (!(h > 0)) throw ContractError("finite_diff_check: step must be positive");

  Tape<T> tape;
  std::vector<Tensor<T>> bound;
  bound.reserve(params.size());
  for (const auto& p : params) bound.push_back(tape.leaf(p));
  const Tensor<T> loss = f(bound);
  if (loss.numel() != 1) throw ContractError("finite_diff_check: objective must return one element");
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericError("finite_diff_check: objective evaluated to a non-finite value");
  }
  const auto grads = tape.backward(loss);

  GradReport report;
  report.tolerance = tol;
  std::vector<Tensor<T>> probe;
  probe.reserve(params.size());
  for (const auto& p : params) probe.push_back(p.detach());

  for (std::size_t k = 0; k < params.size(); ++k) {
    ParamGradError entry;
    entry.name = k < names.size() ? names[k] : "param" + std::to_string(k);
    const auto analytic = grads.of(bound[k]).to_vector();
    const auto base = params[k].to_vector();
    for (std::size_t i = 0; i < base.size(); ++i) {
      Tensor<T> plus(params[k].shape(), base);
      plus.mutable_data()[i] = static_cast<T>(base[i] + h);
      probe[k] = plus;
      const double fp = evaluate(f, probe);
      Tensor<T> minus(params[k].shape(), base);
      minus.mutable_data()[i] = static_cast<T>(base[i] - h);
      probe[k] = minus;
      const double fm = evaluate(f, probe);
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (entry.worst_index.empty() || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = unravel(i, params[k].shape());
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    probe[k] = params[k].detach();
    entry.pass = entry.max_rel_error < tol;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.pass = report.pass && entry.pass;
    report.params.push_back(std::move(entry));
  }
  return report;
}

template GradReport finite_diff_check(const ScalarFn<float>&, const std::vector<Tensor<float>>&, double, double,
                                      const std::vector<std::string>&);
template GradReport finite_diff_check(const ScalarFn<double>&, const std::vector<Tensor<double>>&, double, double,
                                      const std::vector<std::string>&);

}  // namespace crformer
