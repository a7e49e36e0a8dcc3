#include "crformer/model.hpp"

#include "crformer/error.hpp"
#include "crformer/ops.hpp"
#include "crformer/rng.hpp"

namespace crformer {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model: ") + name + " must be positive");
  };
  positive(image_size, "image_size");
  positive(width, "width");
  positive(heads, "heads");
  positive(ff_width, "ff_width");
  positive(layers, "layers");
  positive(num_queries, "num_queries");
  positive(vocab, "vocab");
  positive(max_tokens, "max_tokens");
  for (auto c : stage_channels) positive(c, "stage channel");
  if (image_size % 16 != 0) throw ConfigError("model: image_size must be divisible by 16");
  if (width % heads != 0) throw ConfigError("model: width must be divisible by heads");
  if (width % 4 != 0) throw ConfigError("model: width must be divisible by 4 for 2D positions");
}

bool is_calibration_param(const std::string& name) {
  return name.starts_with("cdec.calib") || name.starts_with("cdec.alpha");
}

template <typename T>
ModelParams<T> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CounterRng rng = CounterRng(seed).stream(0);
  EncoderDims enc;
  enc.vocab = cfg.vocab;
  enc.width = cfg.width;
  enc.heads = cfg.heads;
  enc.ff_width = cfg.ff_width;
  enc.text_blocks = cfg.text_blocks;
  enc.stage_channels = cfg.stage_channels;
  const std::size_t cells = cfg.grid_side() * cfg.grid_side();

  ModelParams<T> p;
  p.text = make_text_encoder<T>(rng, enc);
  p.image = make_image_encoder<T>(rng, enc);
  p.neck = make_neck<T>(rng, cfg.width, cfg.stage_channels[1], cfg.stage_channels[2], cfg.stage_channels[3]);
  p.qgm = make_qgm<T>(rng, cfg.width, cfg.num_queries, cells);
  CdecDims dd;
  dd.width = cfg.width;
  dd.heads = cfg.heads;
  dd.ff_width = cfg.ff_width;
  dd.layers = cfg.layers;
  dd.num_queries = cfg.num_queries;
  dd.grid_cells = cells;
  dd.share_calibration = cfg.share_qgm_params;
  p.cdec = make_cdec<T>(rng, dd);
  p.heads = make_heads<T>(rng, cfg.width, 8);
  return p;
}

template <typename T>
ModelOutput<T> forward(const ModelParams<T>& p, const Tensor<T>& image, const TokenSeq& tokens, Mode mode) {
  const auto keep = tokens.keep_mask();
  ModelOutput<T> out;
  out.text = encode_text(tokens, p.text);
  out.image = encode_image(image, out.text.tokens, keep, p.image);
  out.fused = fusion_neck(out.image.pyramid, p.neck);
  out.queries = qgm(out.fused, out.text.tokens, keep, p.qgm);
  out.decoder = cdec_forward(out.fused, out.queries.queries, out.text.tokens, keep, p.cdec);
  const std::size_t rows = out.fused.dim(0), cols = out.fused.dim(1);
  out.logits = mask_head(reshape(out.decoder.stream, {rows, cols, out.fused.dim(2)}), p.heads);
  if (mode == Mode::kTrain) {
    out.reconstructed = reconstruct(out.decoder.queries, p.heads.recon);
    out.projected = project_text(out.text.tokens, out.text.global, tokens.length, p.heads.text);
  }
  return out;
}

template <typename T>
LossTerms<T> model_loss(const ModelOutput<T>& out, const Tensor<T>& gt, const LossWeights& weights) {
  if (!out.reconstructed.defined()) throw ContractError("model_loss needs a train-mode forward");
  LossTerms<T> l;
  l.seg = seg_loss(out.logits, gt);
  l.recon = recon_loss(out.reconstructed, out.projected);
  l.total = total_loss(l.seg, l.recon, weights);
  return l;
}

#define CRFORMER_INSTANTIATE_MODEL(T)                                                                \
  template ModelParams<T> make_model(const ModelConfig&, std::uint64_t);                             \
  template ModelOutput<T> forward(const ModelParams<T>&, const Tensor<T>&, const TokenSeq&, Mode);  \
  template LossTerms<T> model_loss(const ModelOutput<T>&, const Tensor<T>&, const LossWeights&);

CRFORMER_INSTANTIATE_MODEL(float)
CRFORMER_INSTANTIATE_MODEL(double)

}  // namespace crformer
