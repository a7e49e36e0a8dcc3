#pragma once

// End-to-end model: encoders, fusion neck, query generation, calibration
// decoder, mask head and the language reconstruction branch.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crformer/cdec.hpp"
#include "crformer/encoders.hpp"
#include "crformer/heads.hpp"
#include "crformer/neck_qgm.hpp"
#include "crformer/tensor.hpp"

namespace crformer {

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t width = 64;  // C
  std::size_t heads = 4;
  std::size_t ff_width = 128;
  std::size_t layers = 3;  // N
  std::size_t num_queries = 8;
  std::size_t text_blocks = 2;
  std::size_t vocab = 14;
  std::size_t max_tokens = 20;
  std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
  bool share_qgm_params = false;

  std::size_t grid_side() const { return image_size / 8; }
  /// Throws ConfigError on non-positive or inconsistent extents.
  void validate() const;
};

template <typename T>
struct ModelParams {
  TextEncoderParams<T> text;
  ImageEncoderParams<T> image;
  NeckParams<T> neck;
  QgmParams<T> qgm;
  CdecParams<T> cdec;
  HeadParams<T> heads;
};

/// Every parameter is drawn from one stream of CounterRng(seed).
template <typename T>
ModelParams<T> make_model(const ModelConfig& cfg, std::uint64_t seed);

template <typename T, typename F>
void visit_params(ModelParams<T>& p, F&& f) {
  visit_params("text", p.text, f);
  visit_params("image", p.image, f);
  visit_params("neck", p.neck, f);
  visit_params("qgm", p.qgm, f);
  visit_params("cdec", p.cdec, f);
  visit_params("heads", p.heads, f);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_params(ModelParams<T>& p) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  visit_params(p, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
  return out;
}

/// Parameters of the calibration path (calibration QGMs and gains).
bool is_calibration_param(const std::string& name);

template <typename T>
std::size_t param_count(ModelParams<T>& p) {
  std::size_t n = 0;
  visit_params(p, [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

enum class Mode { kTrain, kInference };

template <typename T>
struct ModelOutput {
  TextFeatures<T> text;
  ImageEncoding<T> image;
  Tensor<T> fused;  // F_v
  QuerySet<T> queries;
  DecoderOutput<T> decoder;
  Tensor<T> logits;         // [H, W]
  Tensor<T> reconstructed;  // [1, C], train mode only
  Tensor<T> projected;      // [1, C], train mode only
};

/// image[H, W, 3]. Inference mode never evaluates the reconstruction branch.
template <typename T>
ModelOutput<T> forward(const ModelParams<T>& p, const Tensor<T>& image, const TokenSeq& tokens, Mode mode);

template <typename T>
struct LossTerms {
  Tensor<T> seg;
  Tensor<T> recon;
  Tensor<T> total;
};

/// Requires a train-mode output.
template <typename T>
LossTerms<T> model_loss(const ModelOutput<T>& out, const Tensor<T>& gt, const LossWeights& weights);

}  // namespace crformer
