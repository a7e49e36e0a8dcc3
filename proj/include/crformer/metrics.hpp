#pragma once

// Mask metrics: per-sample IoU, mean IoU and Precision@X.
//
// Conventions: IoU of two empty masks is 1 and of an empty against a
// non-empty mask is 0; Precision@X counts samples whose IoU is strictly
// greater than X.

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "crformer/tensor.hpp"

namespace crformer {

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // 0 or 1, row-major

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}

  std::size_t count() const;
  bool operator==(const BinaryMask&) const = default;
};

struct MaskPair {
  BinaryMask pred;
  BinaryMask gt;
};

inline constexpr std::array<double, 5> kPrecisionThresholds{0.5, 0.6, 0.7, 0.8, 0.9};

inline constexpr const char* kMetricConventions =
    "IoU of two empty masks is 1, empty vs non-empty is 0; Precision@X counts IoU > X (strict)";

struct MetricReport {
  double miou = 0.0;
  std::map<double, double> precision;  // threshold -> fraction
  std::vector<double> ious;
};

/// Throws DimensionError when extents differ.
double iou(const BinaryMask& pred, const BinaryMask& gt);

/// Arithmetic mean of per-pair IoU. Throws ContractError on an empty list.
double miou(std::span<const MaskPair> pairs);

/// Fraction of pairs with IoU > X for each threshold X. Throws ContractError
/// on an empty list.
std::map<double, double> pr_at_x(std::span<const MaskPair> pairs,
                                 std::span<const double> thresholds = kPrecisionThresholds);

MetricReport report_from_ious(std::vector<double> ious);
MetricReport make_report(std::span<const MaskPair> pairs);

/// Pixel is 1 iff its logit is strictly positive (sigmoid > 0.5).
template <typename T>
BinaryMask binarize(const Tensor<T>& logits);

template <typename T>
Tensor<T> mask_to_tensor(const BinaryMask& mask);

}  // namespace crformer
