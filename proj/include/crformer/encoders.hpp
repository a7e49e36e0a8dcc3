#pragma once

// Toy text and vision encoders with vision-language fusion injected between
// the vision stages.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "crformer/nn.hpp"
#include "crformer/tensor.hpp"

namespace crformer {

/// Tokenized expression padded to a fixed length. Position 0 is the
/// global-slot token; pads form a contiguous tail.
struct TokenSeq {
  std::vector<int> ids;
  std::vector<std::uint8_t> pad;  // 1 at pad positions
  std::size_t length = 0;         // unpadded tokens, global slot included

  std::size_t capacity() const { return ids.size(); }
  /// 1 for real tokens, 0 for pads (the attention keep-mask).
  std::vector<std::uint8_t> keep_mask() const;
  /// Throws ContractError if the fields disagree or no token is unpadded.
  void validate() const;
};

template <typename T>
struct TextFeatures {
  Tensor<T> tokens;  // [L_max, C]
  Tensor<T> global;  // [1, C]
};

template <typename T>
struct FeaturePyramid {
  Tensor<T> f2;  // [H/4, W/4, C2]
  Tensor<T> f3;  // [H/8, W/8, C3]
  Tensor<T> f4;  // [H/16, W/16, C4]
};

template <typename T>
struct TextBlock {
  LayerNormParams<T> attn_norm;
  Attention<T> attn;
  LayerNormParams<T> mlp_norm;
  Mlp<T> mlp;
};

template <typename T>
struct TextEncoderParams {
  Tensor<T> embedding;  // [vocab, C]
  std::vector<TextBlock<T>> blocks;
  LayerNormParams<T> final_norm;
  Linear<T> global_proj;
};

/// Single-head cross-attention from vision tokens (queries) to words.
template <typename T>
struct VlfParams {
  Linear<T> query;  // C_i -> C_i
  Linear<T> key;    // C -> C_i, no bias
  Linear<T> value;  // C -> C_i
  Linear<T> out;    // C_i -> C_i
};

template <typename T>
struct VisionStage {
  Conv<T> down;      // 3x3, stride 2
  Conv<T> residual;  // 3x3, stride 1
};

template <typename T>
struct ImageEncoderParams {
  std::array<VisionStage<T>, 4> stages;
  std::array<VlfParams<T>, 3> fusion;  // after stages 2, 3, 4
};

struct EncoderDims {
  std::size_t vocab = 0;
  std::size_t width = 64;  // C
  std::size_t heads = 4;
  std::size_t ff_width = 128;
  std::size_t text_blocks = 2;
  std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
};

template <typename T>
TextEncoderParams<T> make_text_encoder(CounterRng& rng, const EncoderDims& dims);
template <typename T>
ImageEncoderParams<T> make_image_encoder(CounterRng& rng, const EncoderDims& dims);

/// Embedding + 1D positions + pre-norm transformer blocks with pad-masked
/// self-attention. The global feature is a linear map of the slot-0 row.
template <typename T>
TextFeatures<T> encode_text(const TokenSeq& tokens, const TextEncoderParams<T>& p);

/// Vision-language fusion for one stage: v[H,W,C_i], words[L,C] -> [H,W,C_i].
template <typename T>
Tensor<T> vlf(const VlfParams<T>& p, const Tensor<T>& v, const Tensor<T>& words,
              std::span<const std::uint8_t> keep);

template <typename T>
struct ImageEncoding {
  FeaturePyramid<T> pyramid;
  std::array<Tensor<T>, 4> stages;  // V_1..V_4 (post-stage, pre-injection)
};

/// Four stride-2 stages; fusion after stages 2-4; relu of each fused map is
/// added to the stream before the next stage. Throws DimensionError unless
/// H and W are divisible by 16.
template <typename T>
ImageEncoding<T> encode_image(const Tensor<T>& image, const Tensor<T>& words, std::span<const std::uint8_t> keep,
                              const ImageEncoderParams<T>& p);

template <typename T, typename F>
void visit_params(const std::string& prefix, TextEncoderParams<T>& p, F&& f) {
  f(prefix + ".embedding", p.embedding);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const auto b = prefix + ".block" + std::to_string(i);
    visit_params(b + ".attn_norm", p.blocks[i].attn_norm, f);
    visit_params(b + ".attn", p.blocks[i].attn, f);
    visit_params(b + ".mlp_norm", p.blocks[i].mlp_norm, f);
    visit_params(b + ".mlp", p.blocks[i].mlp, f);
  }
  visit_params(prefix + ".final_norm", p.final_norm, f);
  visit_params(prefix + ".global_proj", p.global_proj, f);
}

template <typename T, typename F>
void visit_params(const std::string& prefix, VlfParams<T>& p, F&& f) {
  visit_params(prefix + ".query", p.query, f);
  visit_params(prefix + ".key", p.key, f);
  visit_params(prefix + ".value", p.value, f);
  visit_params(prefix + ".out", p.out, f);
}

template <typename T, typename F>
void visit_params(const std::string& prefix, ImageEncoderParams<T>& p, F&& f) {
  for (std::size_t i = 0; i < 4; ++i) {
    const auto s = prefix + ".stage" + std::to_string(i + 1);
    visit_params(s + ".down", p.stages[i].down, f);
    visit_params(s + ".residual", p.stages[i].residual, f);
  }
  for (std::size_t i = 0; i < 3; ++i) visit_params(prefix + ".vlf" + std::to_string(i + 2), p.fusion[i], f);
}

}  // namespace crformer
