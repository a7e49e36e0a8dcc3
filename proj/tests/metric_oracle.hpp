#pragma once

// Pixel-counting reference for IoU, mean IoU and Precision@X.

#include <cstddef>
#include <map>
#include <vector>

#include "crformer/metrics.hpp"
#include "crformer/rng.hpp"

namespace testutil {

struct CountedIou {
  std::size_t inter = 0;
  std::size_t uni = 0;
  double value() const { return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni); }
};

inline CountedIou count_iou(const crformer::BinaryMask& a, const crformer::BinaryMask& b) {
  CountedIou c;
  for (std::size_t y = 0; y < a.height; ++y) {
    for (std::size_t x = 0; x < a.width; ++x) {
      const bool p = a.pixels[y * a.width + x] != 0, g = b.pixels[y * b.width + x] != 0;
      c.inter += p && g;
      c.uni += p || g;
    }
  }
  return c;
}

inline double brute_miou(const std::vector<crformer::MaskPair>& pairs) {
  double s = 0.0;
  for (const auto& p : pairs) s += count_iou(p.pred, p.gt).value();
  return s / static_cast<double>(pairs.size());
}

inline std::map<double, double> brute_pr(const std::vector<crformer::MaskPair>& pairs) {
  std::map<double, double> out;
  for (double x : crformer::kPrecisionThresholds) {
    std::size_t hits = 0;
    for (const auto& p : pairs) hits += count_iou(p.pred, p.gt).value() > x;
    out[x] = static_cast<double>(hits) / static_cast<double>(pairs.size());
  }
  return out;
}

/// Random 16x16 pairs with varied densities, including empty and shared masks.
inline std::vector<crformer::MaskPair> random_mask_pairs(std::uint64_t seed, std::size_t count, std::size_t side = 16) {
  crformer::CounterRng rng(seed);
  std::vector<crformer::MaskPair> pairs;
  for (std::size_t i = 0; i < count; ++i) {
    crformer::MaskPair p{crformer::BinaryMask(side, side), crformer::BinaryMask(side, side)};
    const double dp = rng.uniform(), dg = rng.uniform();
    const std::size_t mode = rng.below(10);
    for (std::size_t k = 0; k < side * side; ++k) {
      p.gt.pixels[k] = mode == 0 ? 0 : rng.uniform() < dg;
      p.pred.pixels[k] = mode == 1 ? 0 : (mode == 2 ? p.gt.pixels[k] : rng.uniform() < dp);
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace testutil
