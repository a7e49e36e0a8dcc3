#include "crformer/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "crformer/error.hpp"
#include "crformer/rng.hpp"

namespace crformer {

using nlohmann::json;

namespace {

/// Reads optional fields from one JSON object and rejects leftovers.
class FieldReader {
 public:
  FieldReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("config: " + msg);
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::kFloat64 ? "float64" : "float32"; }

void Config::validate() const {
  require(schema_version == kConfigSchemaVersion, "unsupported schema_version " + std::to_string(schema_version));
  model.validate();
  require(model.vocab == vocab_size(), "model.vocab must be " + std::to_string(vocab_size()));
  require(loss.seg >= 0 && loss.recon >= 0 && std::isfinite(loss.seg) && std::isfinite(loss.recon),
          "loss weights must be finite and non-negative");
  require(optim.lr > 0 && std::isfinite(optim.lr), "optim.lr must be positive");
  require(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1, "betas must lie in [0, 1)");
  require(optim.eps > 0, "optim.eps must be positive");
  require(optim.epochs > 0 && optim.batch_size > 0, "epochs and batch_size must be positive");
  require(data.train_size > 0, "data.train_size must be positive");
  require(eval_every > 0, "eval_every must be positive");
  require(rng == CounterRng::kAlgorithm, "rng must be '" + std::string(CounterRng::kAlgorithm) + "'");
  data_spec().validate();
}

DataSpec Config::data_spec() const {
  DataSpec s;
  s.image_size = model.image_size;
  s.grid = data.grid;
  s.min_objects = data.min_objects;
  s.max_objects = data.max_objects;
  s.max_tokens = model.max_tokens;
  s.max_retries = data.max_retries;
  return s;
}

Config default_config() { return Config{}; }

Config full_scale_config() {
  Config c;
  c.model.image_size = 480;
  c.model.width = 512;
  c.model.heads = 8;
  c.model.ff_width = 2048;
  c.model.layers = 3;
  c.model.num_queries = 24;
  c.model.stage_channels = {128, 256, 512, 1024};
  c.optim.lr = 0.005;
  c.optim.epochs = 40;
  c.optim.batch_size = 64;
  c.data.grid = 8;
  return c;
}

json to_json(const Config& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["rng"] = c.rng;
  j["precision"] = to_string(c.precision);
  j["cdec_enabled"] = c.cdec_enabled;
  j["share_qgm_params"] = c.model.share_qgm_params;
  j["eval_every"] = c.eval_every;
  const auto& m = c.model;
  j["model"] = {{"image_size", m.image_size},   {"width", m.width},
                {"heads", m.heads},             {"ff_width", m.ff_width},
                {"layers", m.layers},           {"num_queries", m.num_queries},
                {"text_blocks", m.text_blocks}, {"vocab", m.vocab},
                {"max_tokens", m.max_tokens},   {"stage_channels", m.stage_channels}};
  j["loss"] = {{"omega_seg", c.loss.seg}, {"omega_re", c.loss.recon}};
  const auto& o = c.optim;
  j["optim"] = {{"lr", o.lr},         {"beta1", o.beta1},   {"beta2", o.beta2},
                {"eps", o.eps},       {"epochs", o.epochs}, {"batch_size", o.batch_size}};
  const auto& d = c.data;
  j["data"] = {{"grid", d.grid},         {"min_objects", d.min_objects}, {"max_objects", d.max_objects},
               {"max_retries", d.max_retries}, {"train_size", d.train_size},   {"val_size", d.val_size},
               {"train_seed", d.train_seed},   {"val_seed", d.val_seed}};
  return j;
}

Config config_from_json(const json& j) {
  Config c;
  FieldReader top(j, "config");
  top.get("schema_version", c.schema_version);
  if (c.schema_version != kConfigSchemaVersion) {
    throw ConfigError("config: unsupported schema_version " + std::to_string(c.schema_version));
  }
  top.get("seed", c.seed);
  top.get("rng", c.rng);
  std::string precision = to_string(c.precision);
  top.get("precision", precision);
  if (precision == "float32") {
    c.precision = Precision::kFloat32;
  } else if (precision == "float64") {
    c.precision = Precision::kFloat64;
  } else {
    throw ConfigError("config.precision: expected float32 or float64, got '" + precision + "'");
  }
  top.get("cdec_enabled", c.cdec_enabled);
  top.get("share_qgm_params", c.model.share_qgm_params);
  top.get("eval_every", c.eval_every);
  if (const json* m = top.child("model")) {
    FieldReader r(*m, "config.model");
    r.get("image_size", c.model.image_size);
    r.get("width", c.model.width);
    r.get("heads", c.model.heads);
    r.get("ff_width", c.model.ff_width);
    r.get("layers", c.model.layers);
    r.get("num_queries", c.model.num_queries);
    r.get("text_blocks", c.model.text_blocks);
    r.get("vocab", c.model.vocab);
    r.get("max_tokens", c.model.max_tokens);
    r.get("stage_channels", c.model.stage_channels);
    r.finish();
  }
  if (const json* l = top.child("loss")) {
    FieldReader r(*l, "config.loss");
    r.get("omega_seg", c.loss.seg);
    r.get("omega_re", c.loss.recon);
    r.finish();
  }
  if (const json* o = top.child("optim")) {
    FieldReader r(*o, "config.optim");
    r.get("lr", c.optim.lr);
    r.get("beta1", c.optim.beta1);
    r.get("beta2", c.optim.beta2);
    r.get("eps", c.optim.eps);
    r.get("epochs", c.optim.epochs);
    r.get("batch_size", c.optim.batch_size);
    r.finish();
  }
  if (const json* d = top.child("data")) {
    FieldReader r(*d, "config.data");
    r.get("grid", c.data.grid);
    r.get("min_objects", c.data.min_objects);
    r.get("max_objects", c.data.max_objects);
    r.get("max_retries", c.data.max_retries);
    r.get("train_size", c.data.train_size);
    r.get("val_size", c.data.val_size);
    r.get("train_seed", c.data.train_seed);
    r.get("val_seed", c.data.val_seed);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

json to_json(const DataSpec& s) {
  return {{"image_size", s.image_size},   {"grid", s.grid},           {"min_objects", s.min_objects},
          {"max_objects", s.max_objects}, {"max_tokens", s.max_tokens}, {"max_retries", s.max_retries}};
}

DataSpec data_spec_from_json(const json& j) {
  DataSpec s;
  FieldReader r(j, "spec");
  r.get("image_size", s.image_size);
  r.get("grid", s.grid);
  r.get("min_objects", s.min_objects);
  r.get("max_objects", s.max_objects);
  r.get("max_tokens", s.max_tokens);
  r.get("max_retries", s.max_retries);
  r.finish();
  s.validate();
  return s;
}

}  // namespace crformer
