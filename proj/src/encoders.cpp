#include "crformer/encoders.hpp"

#include <cmath>

#include "crformer/error.hpp"
#include "crformer/instrument.hpp"
#include "crformer/ops.hpp"

namespace crformer {

std::vector<std::uint8_t> TokenSeq::keep_mask() const {
  std::vector<std::uint8_t> keep(pad.size());
  for (std::size_t i = 0; i < pad.size(); ++i) keep[i] = pad[i] ? 0 : 1;
  return keep;
}

void TokenSeq::validate() const {
  if (ids.size() != pad.size()) throw ContractError("token ids and pad mask differ in length");
  if (length == 0) throw ContractError("token sequence is entirely padding");
  if (length > ids.size()) throw ContractError("token length exceeds capacity");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if ((pad[i] != 0) != (i >= length)) throw ContractError("pad positions must form a contiguous tail");
  }
}

template <typename T>
TextEncoderParams<T> make_text_encoder(CounterRng& rng, const EncoderDims& dims) {
  TextEncoderParams<T> p;
  const auto C = dims.width;
  std::vector<T> emb(dims.vocab * C);
  // Triangular on [-1, 1].
  for (auto& e : emb) e = static_cast<T>(rng.uniform(-1.0, 1.0) + rng.uniform(-1.0, 1.0)) * T(0.5);
  p.embedding = Tensor<T>({dims.vocab, C}, std::move(emb));
  for (std::size_t i = 0; i < dims.text_blocks; ++i) {
    TextBlock<T> b;
    b.attn_norm = make_layer_norm<T>(C);
    b.attn = make_attention<T>(rng, C, dims.heads);
    b.mlp_norm = make_layer_norm<T>(C);
    b.mlp = make_mlp<T>(rng, C, dims.ff_width);
    p.blocks.push_back(std::move(b));
  }
  p.final_norm = make_layer_norm<T>(C);
  p.global_proj = make_linear<T>(rng, C, C);
  return p;
}

template <typename T>
ImageEncoderParams<T> make_image_encoder(CounterRng& rng, const EncoderDims& dims) {
  ImageEncoderParams<T> p;
  std::size_t cin = 3;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto c = dims.stage_channels[i];
    p.stages[i].down = make_conv<T>(rng, 3, cin, c, 2);
    p.stages[i].residual = make_conv<T>(rng, 3, c, c, 1);
    cin = c;
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const auto c = dims.stage_channels[i + 1];
    p.fusion[i].query = make_linear<T>(rng, c, c);
    p.fusion[i].key = make_linear<T>(rng, dims.width, c, false);
    p.fusion[i].value = make_linear<T>(rng, dims.width, c);
    p.fusion[i].out = make_linear<T>(rng, c, c);
  }
  return p;
}

template <typename T>
TextFeatures<T> encode_text(const TokenSeq& tokens, const TextEncoderParams<T>& p) {
  tokens.validate();
  ScopedTag tag("text");
  const std::size_t C = p.embedding.dim(1);
  const auto keep = tokens.keep_mask();
  Tensor<T> x = add(gather_rows(p.embedding, std::span<const int>(tokens.ids)),
                    sine_positional_1d<T>(tokens.capacity(), C));
  for (const auto& block : p.blocks) {
    x = add(x, mhsa(block.attn, layernorm(block.attn_norm, x), keep));
    x = add(x, mlp(block.mlp, layernorm(block.mlp_norm, x)));
  }
  TextFeatures<T> out;
  out.tokens = layernorm(p.final_norm, x);
  out.global = linear(p.global_proj, slice(out.tokens, 0, 0, 1));
  return out;
}

template <typename T>
Tensor<T> vlf(const VlfParams<T>& p, const Tensor<T>& v, const Tensor<T>& words,
              std::span<const std::uint8_t> keep) {
  if (v.rank() != 3 || v.dim(2) != p.query.in()) {
    throw DimensionError("vlf: vision features " + shape_str(v.shape()) + " do not match stage width " +
                         std::to_string(p.query.in()));
  }
  ScopedTag tag("vlf");
  const std::size_t H = v.dim(0), W = v.dim(1), Ci = v.dim(2);
  const Tensor<T> vq = linear(p.query, reshape(v, {H * W, Ci}));
  const Tensor<T> tk = linear(p.key, words);
  const Tensor<T> tv = linear(p.value, words);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(Ci));
  const Tensor<T> attn = softmax_lastdim(scale(matmul_nt(vq, tk), inv_sqrt), keep);
  return linear(p.out, reshape(matmul(attn, tv), {H, W, Ci}));
}

template <typename T>
ImageEncoding<T> encode_image(const Tensor<T>& image, const Tensor<T>& words, std::span<const std::uint8_t> keep,
                              const ImageEncoderParams<T>& p) {
  if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) % 16 != 0 || image.dim(1) % 16 != 0) {
    throw DimensionError("encode_image: image must be [H,W,3] with H and W divisible by 16, got " +
                         shape_str(image.shape()));
  }
  ScopedTag tag("vision");
  auto stage = [](const VisionStage<T>& s, const Tensor<T>& x) {
    const Tensor<T> h = relu(conv(s.down, x));
    return relu(add(h, conv(s.residual, h)));
  };
  ImageEncoding<T> out;
  out.stages[0] = stage(p.stages[0], image);
  out.stages[1] = stage(p.stages[1], out.stages[0]);
  out.pyramid.f2 = vlf(p.fusion[0], out.stages[1], words, keep);
  out.stages[2] = stage(p.stages[2], add(out.stages[1], relu(out.pyramid.f2)));
  out.pyramid.f3 = vlf(p.fusion[1], out.stages[2], words, keep);
  out.stages[3] = stage(p.stages[3], add(out.stages[2], relu(out.pyramid.f3)));
  out.pyramid.f4 = vlf(p.fusion[2], out.stages[3], words, keep);
  return out;
}

#define CRFORMER_INSTANTIATE_ENCODERS(T)                                                             \
  template TextEncoderParams<T> make_text_encoder(CounterRng&, const EncoderDims&);                  \
  template ImageEncoderParams<T> make_image_encoder(CounterRng&, const EncoderDims&);                \
  template TextFeatures<T> encode_text(const TokenSeq&, const TextEncoderParams<T>&);                \
  template Tensor<T> vlf(const VlfParams<T>&, const Tensor<T>&, const Tensor<T>&,                    \
                         std::span<const std::uint8_t>);                                             \
  template ImageEncoding<T> encode_image(const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>, \
                                         const ImageEncoderParams<T>&);

CRFORMER_INSTANTIATE_ENCODERS(float)
CRFORMER_INSTANTIATE_ENCODERS(double)

}  // namespace crformer
