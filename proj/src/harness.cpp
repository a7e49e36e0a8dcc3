#include "crformer/harness.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "crformer/error.hpp"
#include "crformer/rng.hpp"

namespace crformer {

using nlohmann::json;

namespace {

constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kJitterStream = 2;
constexpr double kJitter = 0.1;

std::string threshold_key(double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

template <typename T>
struct PreparedSample {
  Tensor<T> image;
  Tensor<T> gt;
  const SampleRecord* record = nullptr;
};

template <typename T>
std::vector<PreparedSample<T>> prepare(std::span<const SampleRecord> samples) {
  std::vector<PreparedSample<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({tensor_cast<T>(s.image), mask_to_tensor<T>(s.gt_mask), &s});
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> named_params_const(const ModelParams<T>& p) {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (auto& [name, t] : named_params(const_cast<ModelParams<T>&>(p))) out.emplace_back(name, t);
  return out;
}

void check_sample_extents(const Config& cfg, std::span<const SampleRecord> samples) {
  for (const auto& s : samples) {
    if (s.image.dim(0) != cfg.model.image_size || s.image.dim(1) != cfg.model.image_size) {
      throw ConfigError("sample image " + shape_str(s.image.shape()) + " does not match model image_size " +
                        std::to_string(cfg.model.image_size));
    }
    if (s.tokens.capacity() != cfg.model.max_tokens) {
      throw ConfigError("sample token capacity " + std::to_string(s.tokens.capacity()) +
                        " does not match model max_tokens " + std::to_string(cfg.model.max_tokens));
    }
  }
}

}  // namespace

json to_json(const MetricReport& r) {
  json pr = json::object();
  for (const auto& [x, v] : r.precision) pr[threshold_key(x)] = v;
  return {{"conventions", kMetricConventions}, {"miou", r.miou}, {"pr", pr}, {"ious", r.ious}};
}

json to_json(const StepRecord& s) {
  return {{"type", "step"},       {"step", s.step},   {"epoch", s.epoch},
          {"l_seg", s.l_seg},     {"l_re", s.l_re},   {"l_total", s.l_total}};
}

json to_json(const EpochRecord& e) {
  json j = {{"type", "epoch"}, {"epoch", e.epoch}, {"step", e.step}};
  if (e.train) j["train"] = to_json(*e.train);
  if (e.val) j["val"] = to_json(*e.val);
  return j;
}

std::string RunLog::to_jsonl() const {
  std::string out;
  std::size_t s = 0;
  for (const auto& e : epochs) {
    for (; s < steps.size() && steps[s].step <= e.step; ++s) out += to_json(steps[s]).dump() + "\n";
    out += to_json(e).dump() + "\n";
  }
  for (; s < steps.size(); ++s) out += to_json(steps[s]).dump() + "\n";
  return out;
}

std::vector<std::string> trainable_names(const Config& cfg, const std::vector<std::string>& all) {
  std::vector<std::string> out;
  for (const auto& n : all) {
    if (!cfg.cdec_enabled && is_calibration_param(n)) continue;
    out.push_back(n);
  }
  return out;
}

template <typename T>
TrainState<T> init_train_state(const Config& cfg) {
  cfg.validate();
  TrainState<T> st;
  st.params = make_model<T>(cfg.model, cfg.seed);
  std::vector<std::string> all;
  for (auto& [name, t] : named_params(st.params)) all.push_back(name);
  st.trainable = trainable_names(cfg, all);
  return st;
}

template <typename T>
Checkpoint make_checkpoint(const Config& cfg, const TrainState<T>& state) {
  Checkpoint ck;
  ck.meta = {{"config", to_json(cfg)}, {"step", state.step}, {"trainable", state.trainable}};
  for (auto& [name, t] : named_params_const(state.params)) ck.tensors.emplace_back(name, tensor_cast<float>(*t));
  for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
    const auto& name = state.trainable.at(i);
    const Shape shape{state.adam.m[i].size()};
    ck.tensors.emplace_back("adam.m." + name,
                            tensor_cast<float>(Tensor<T>(shape, std::vector<T>(state.adam.m[i]))));
    ck.tensors.emplace_back("adam.v." + name,
                            tensor_cast<float>(Tensor<T>(shape, std::vector<T>(state.adam.v[i]))));
  }
  return ck;
}

Config checkpoint_config(const Checkpoint& ck) {
  if (!ck.meta.contains("config")) throw FormatError("checkpoint metadata has no config");
  try {
    return config_from_json(ck.meta.at("config"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config does not match this model version: ") + e.what());
  }
}

template <typename T>
TrainState<T> restore_train_state(const Checkpoint& ck) {
  const Config cfg = checkpoint_config(ck);
  TrainState<T> st = init_train_state<T>(cfg);
  for (auto& [name, t] : named_params(st.params)) {
    const auto& src = ck.tensor(name);
    if (src.shape() != t->shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                        shape_str(t->shape()));
    }
    *t = tensor_cast<T>(src);
  }
  st.step = ck.meta.value("step", std::uint64_t{0});
  st.adam.step = st.step;
  if (ck.has("adam.m." + st.trainable.front())) {
    for (const auto& name : st.trainable) {
      const auto m = tensor_cast<T>(ck.tensor("adam.m." + name)).to_vector();
      const auto v = tensor_cast<T>(ck.tensor("adam.v." + name)).to_vector();
      st.adam.m.push_back(m);
      st.adam.v.push_back(v);
    }
  }
  return st;
}

template <typename T>
std::vector<BinaryMask> predict_masks(const ModelParams<T>& params, std::span<const SampleRecord> samples) {
  std::vector<BinaryMask> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const auto fwd = forward(params, tensor_cast<T>(s.image), s.tokens, Mode::kInference);
    out.push_back(binarize(fwd.logits));
  }
  return out;
}

template <typename T>
MetricReport evaluate(const ModelParams<T>& params, std::span<const SampleRecord> samples) {
  if (samples.empty()) throw ContractError("evaluate: empty split");
  const auto preds = predict_masks(params, samples);
  std::vector<double> ious;
  ious.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) ious.push_back(iou(preds[i], samples[i].gt_mask));
  return report_from_ious(std::move(ious));
}

MetricReport evaluate(const Checkpoint& ck, std::span<const SampleRecord> samples) {
  const Config cfg = checkpoint_config(ck);
  check_sample_extents(cfg, samples);
  if (cfg.precision == Precision::kFloat64) return evaluate(restore_train_state<double>(ck).params, samples);
  return evaluate(restore_train_state<float>(ck).params, samples);
}

std::vector<BinaryMask> predict_masks(const Checkpoint& ck, std::span<const SampleRecord> samples) {
  const Config cfg = checkpoint_config(ck);
  check_sample_extents(cfg, samples);
  if (cfg.precision == Precision::kFloat64) return predict_masks(restore_train_state<double>(ck).params, samples);
  return predict_masks(restore_train_state<float>(ck).params, samples);
}

namespace {

template <typename T>
TrainResult run_training(const Config& cfg, const std::vector<SampleRecord>& train_set,
                         const std::vector<SampleRecord>& val_set, const TrainOptions& opts) {
  if (train_set.empty()) throw ContractError("train: empty training split");
  check_sample_extents(cfg, train_set);
  check_sample_extents(cfg, val_set);
  TrainState<T> st = init_train_state<T>(cfg);
  const auto train_data = prepare<T>(train_set);

  std::vector<std::size_t> index;  // trainable name -> position in named_params
  {
    const auto named = named_params(st.params);
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < named.size(); ++i) pos[named[i].first] = i;
    for (const auto& n : st.trainable) index.push_back(pos.at(n));
  }
  const AdamHyper hyper{cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps};

  std::ofstream log_file;
  std::string ckpt_path;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log_file.open(std::filesystem::path(opts.out_dir) / "log.jsonl", std::ios::trunc);
    if (!log_file) throw FormatError("cannot write '" + opts.out_dir + "/log.jsonl'");
    ckpt_path = (std::filesystem::path(opts.out_dir) / "checkpoint.crfk").string();
    std::ofstream(std::filesystem::path(opts.out_dir) / "config.json", std::ios::trunc) << to_json(cfg).dump(2) << "\n";
  }

  TrainResult result;
  const CounterRng shuffle_root = CounterRng(cfg.seed).stream(kShuffleStream);
  const std::size_t n = train_data.size();
  const std::size_t B = cfg.optim.batch_size;

  try {
    for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      CounterRng rng = shuffle_root.stream(epoch);
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

      for (std::size_t start = 0; start < n; start += B) {
        const std::size_t end = std::min(n, start + B);
        std::vector<std::vector<T>> acc(index.size());
        {
          const auto named = named_params(st.params);
          for (std::size_t k = 0; k < index.size(); ++k) acc[k].assign(named[index[k]].second->numel(), T(0));
        }
        StepRecord rec;
        rec.epoch = epoch;
        for (std::size_t b = start; b < end; ++b) {
          const auto& sample = train_data[order[b]];
          Tape<T> tape;
          ModelParams<T> bound = st.params;
          auto named = named_params(bound);
          std::vector<Tensor<T>> leaves;
          leaves.reserve(index.size());
          for (auto k : index) {
            *named[k].second = tape.leaf(*named[k].second);
            leaves.push_back(*named[k].second);
          }
          const auto out = forward(bound, sample.image, sample.record->tokens, Mode::kTrain);
          const auto loss = model_loss(out, sample.gt, cfg.loss);
          const double total = static_cast<double>(loss.total.item());
          if (!std::isfinite(total)) {
            throw NumericError("non-finite loss at step " + std::to_string(st.step + 1) + " (sample seed " +
                               std::to_string(sample.record->seed) + ")");
          }
          rec.l_seg += static_cast<double>(loss.seg.item());
          rec.l_re += static_cast<double>(loss.recon.item());
          rec.l_total += total;
          const auto grads = tape.backward(loss.total);
          for (std::size_t k = 0; k < leaves.size(); ++k) {
            const auto gt = grads.of(leaves[k]);
            const auto g = gt.data();
            auto& a = acc[k];
            for (std::size_t i = 0; i < a.size(); ++i) a[i] += g[i];
          }
        }
        const T inv = T(1) / static_cast<T>(end - start);
        for (auto& a : acc) {
          for (auto& x : a) x *= inv;
        }
        auto named = named_params(st.params);
        std::vector<Tensor<T>*> targets;
        for (auto k : index) targets.push_back(named[k].second);
        adam_step<T>(targets, acc, st.trainable, st.adam, hyper);
        ++st.step;
        rec.step = st.step;
        const double inv_b = 1.0 / static_cast<double>(end - start);
        rec.l_seg *= inv_b;
        rec.l_re *= inv_b;
        rec.l_total *= inv_b;
        result.log.steps.push_back(rec);
        if (log_file) log_file << to_json(rec).dump() << "\n";
      }

      EpochRecord er;
      er.epoch = epoch;
      er.step = st.step;
      if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.optim.epochs) {
        er.train = evaluate(st.params, std::span<const SampleRecord>(train_set));
        if (!val_set.empty()) er.val = evaluate(st.params, std::span<const SampleRecord>(val_set));
      }
      result.log.epochs.push_back(er);
      if (log_file) log_file << to_json(er).dump() << std::endl;
      if (!ckpt_path.empty()) save_checkpoint(ckpt_path, make_checkpoint(cfg, st));
      if (opts.on_epoch) opts.on_epoch(er);
    }
  } catch (const NumericError& e) {
    result.aborted = true;
    result.failure = e.what();
  }
  result.checkpoint = make_checkpoint(cfg, st);
  if (result.aborted && !ckpt_path.empty()) save_checkpoint(ckpt_path, result.checkpoint);
  return result;
}

}  // namespace

TrainResult train(const Config& cfg, const std::vector<SampleRecord>& train_set,
                  const std::vector<SampleRecord>& val_set, const TrainOptions& opts) {
  cfg.validate();
  if (cfg.precision == Precision::kFloat64) return run_training<double>(cfg, train_set, val_set, opts);
  return run_training<float>(cfg, train_set, val_set, opts);
}

TrainResult train(const Config& cfg, const TrainOptions& opts) {
  cfg.validate();
  const auto spec = cfg.data_spec();
  const auto train_set = gen_split(cfg.data.train_seed, cfg.data.train_size, spec);
  const auto val_set = gen_split(cfg.data.val_seed, cfg.data.val_size, spec);
  return train(cfg, train_set, val_set, opts);
}

Config gradcheck_config() {
  Config c;
  c.precision = Precision::kFloat64;
  c.model.image_size = 32;
  c.model.width = 16;
  c.model.heads = 2;
  c.model.ff_width = 32;
  c.model.layers = 2;
  c.model.num_queries = 4;
  c.model.text_blocks = 1;
  c.model.max_tokens = 8;
  c.model.stage_channels = {4, 8, 8, 16};
  c.data.min_objects = 2;
  c.data.max_objects = 4;
  return c;
}

ModelGradcheck model_gradcheck(const Config& cfg, std::size_t token_length, double h, double tol) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto spec = cfg.data_spec();
  std::optional<SampleRecord> sample;
  for (std::size_t i = 0; i < 4096 && !sample; ++i) {
    auto s = gen_sample(sample_seed(cfg.data.train_seed, i), spec);
    if (s.tokens.length == token_length) sample = std::move(s);
  }
  if (!sample) throw ConfigError("gradcheck: no sample with " + std::to_string(token_length) + " tokens");

  // Checked at a jittered point: zero biases leave relu inputs exactly at 0.
  ModelParams<double> base = make_model<double>(cfg.model, cfg.seed);
  CounterRng jitter = CounterRng(cfg.seed).stream(kJitterStream);
  std::vector<Tensor<double>> params;
  std::vector<std::string> names;
  for (auto& [name, t] : named_params(base)) {
    auto v = t->mutable_data();
    for (auto& x : v) x += jitter.uniform(-kJitter, kJitter);
    names.push_back(name);
    params.push_back(*t);
  }
  const Tensor<double> image = tensor_cast<double>(sample->image);
  const Tensor<double> gt = mask_to_tensor<double>(sample->gt_mask);
  const TokenSeq tokens = sample->tokens;
  const LossWeights weights = cfg.loss;
  ScalarFn<double> f = [&](const std::vector<Tensor<double>>& ps) {
    ModelParams<double> m = base;
    auto named = named_params(m);
    for (std::size_t i = 0; i < named.size(); ++i) *named[i].second = ps[i];
    return model_loss(forward(m, image, tokens, Mode::kTrain), gt, weights).total;
  };
  ModelGradcheck out;
  out.report = finite_diff_check<double>(f, params, h, tol, names);
  for (const auto& p : params) out.num_params += p.numel();
  out.text = sample->text;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

#define CRFORMER_INSTANTIATE_HARNESS(T)                                                                \
  template TrainState<T> init_train_state(const Config&);                                              \
  template Checkpoint make_checkpoint(const Config&, const TrainState<T>&);                            \
  template TrainState<T> restore_train_state(const Checkpoint&);                                       \
  template std::vector<BinaryMask> predict_masks(const ModelParams<T>&, std::span<const SampleRecord>); \
  template MetricReport evaluate(const ModelParams<T>&, std::span<const SampleRecord>);

CRFORMER_INSTANTIATE_HARNESS(float)
CRFORMER_INSTANTIATE_HARNESS(double)

}  // namespace crformer
