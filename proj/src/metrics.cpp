#include "crformer/metrics.hpp"

#include <numeric>

#include "crformer/error.hpp"

namespace crformer {

std::size_t BinaryMask::count() const {
  std::size_t n = 0;
  for (auto p : pixels) n += p != 0;
  return n;
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.pixels.size() != gt.pixels.size()) {
    throw DimensionError("iou: mask extents differ (" + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " vs " + std::to_string(gt.height) + "x" + std::to_string(gt.width) + ")");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const bool a = pred.pixels[i] != 0, b = gt.pixels[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(std::span<const MaskPair> pairs) {
  if (pairs.empty()) throw ContractError("miou: no mask pairs");
  double total = 0.0;
  for (const auto& p : pairs) total += iou(p.pred, p.gt);
  return total / static_cast<double>(pairs.size());
}

std::map<double, double> pr_at_x(std::span<const MaskPair> pairs, std::span<const double> thresholds) {
  if (pairs.empty()) throw ContractError("pr_at_x: no mask pairs");
  std::vector<double> ious;
  ious.reserve(pairs.size());
  for (const auto& p : pairs) ious.push_back(iou(p.pred, p.gt));
  std::map<double, double> out;
  for (double x : thresholds) {
    std::size_t hits = 0;
    for (double v : ious) hits += v > x;
    out[x] = static_cast<double>(hits) / static_cast<double>(ious.size());
  }
  return out;
}

MetricReport report_from_ious(std::vector<double> ious) {
  if (ious.empty()) throw ContractError("metric report: no samples");
  MetricReport r;
  r.miou = std::accumulate(ious.begin(), ious.end(), 0.0) / static_cast<double>(ious.size());
  for (double x : kPrecisionThresholds) {
    std::size_t hits = 0;
    for (double v : ious) hits += v > x;
    r.precision[x] = static_cast<double>(hits) / static_cast<double>(ious.size());
  }
  r.ious = std::move(ious);
  return r;
}

MetricReport make_report(std::span<const MaskPair> pairs) {
  if (pairs.empty()) throw ContractError("metric report: no samples");
  std::vector<double> ious;
  for (const auto& p : pairs) ious.push_back(iou(p.pred, p.gt));
  return report_from_ious(std::move(ious));
}

template <typename T>
BinaryMask binarize(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("binarize: expected [H,W] logits, got " + shape_str(logits.shape()));
  BinaryMask m(logits.dim(0), logits.dim(1));
  auto v = logits.data();
  for (std::size_t i = 0; i < v.size(); ++i) m.pixels[i] = v[i] > T(0) ? 1 : 0;
  return m;
}

template <typename T>
Tensor<T> mask_to_tensor(const BinaryMask& mask) {
  std::vector<T> v(mask.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.pixels[i] ? T(1) : T(0);
  return Tensor<T>({mask.height, mask.width}, std::move(v));
}

template BinaryMask binarize(const Tensor<float>&);
template BinaryMask binarize(const Tensor<double>&);
template Tensor<float> mask_to_tensor(const BinaryMask&);
template Tensor<double> mask_to_tensor(const BinaryMask&);

}  // namespace crformer
