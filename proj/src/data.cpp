#include "crformer/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "crformer/error.hpp"
#include "crformer/rng.hpp"

namespace crformer {

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 4> kPalette{{
    {230, 40, 40},   // red
    {40, 200, 60},   // green
    {50, 80, 240},   // blue
    {240, 220, 40},  // yellow
}};

constexpr std::array<Relation, 4> kRelationOrder{Relation::kAbove, Relation::kBelow, Relation::kLeftOf,
                                                 Relation::kRightOf};

bool same_kind(const SceneObject& o, Color c, ShapeKind s) { return o.color == c && o.shape == s; }

bool covers(const SceneObject& obj, double cell, double px, double py) {
  const double cx = (static_cast<double>(obj.col) + 0.5) * cell;
  const double cy = (static_cast<double>(obj.row) + 0.5) * cell;
  const double dx = px - cx, dy = py - cy;
  switch (obj.shape) {
    case ShapeKind::kCircle: {
      const double r = 0.4375 * cell;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::kSquare: {
      const double h = 0.375 * cell;
      return std::abs(dx) <= h && std::abs(dy) <= h;
    }
    case ShapeKind::kTriangle: {
      const double r = 0.4375 * cell;
      if (dy < -r || dy > r) return false;
      return std::abs(dx) <= (dy + r) / 2.0;
    }
  }
  return false;
}

}  // namespace

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words{"<global>", "<pad>",  "red",   "green", "blue",  "yellow", "circle",
                                              "square",   "triangle", "left", "right", "of", "above", "below"};
  return words;
}

std::size_t vocab_size() { return vocabulary().size(); }

int word_id(std::string_view word) {
  const auto& v = vocabulary();
  for (std::size_t i = 2; i < v.size(); ++i) {
    if (v[i] == word) return static_cast<int>(i);
  }
  throw FormatError("unknown word '" + std::string(word) + "'");
}

const std::string& word_text(int id) {
  const auto& v = vocabulary();
  if (id < 0 || static_cast<std::size_t>(id) >= v.size()) throw FormatError("token id out of range: " + std::to_string(id));
  return v[static_cast<std::size_t>(id)];
}

std::string_view to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "";
}

std::string_view to_string(Color c) {
  switch (c) {
    case Color::kRed: return "red";
    case Color::kGreen: return "green";
    case Color::kBlue: return "blue";
    case Color::kYellow: return "yellow";
  }
  return "";
}

std::vector<std::string> Expression::words() const {
  std::vector<std::string> w{std::string(to_string(color)), std::string(to_string(shape))};
  if (relation) {
    switch (*relation) {
      case Relation::kAbove: w.emplace_back("above"); break;
      case Relation::kBelow: w.emplace_back("below"); break;
      case Relation::kLeftOf: w.insert(w.end(), {"left", "of"}); break;
      case Relation::kRightOf: w.insert(w.end(), {"right", "of"}); break;
    }
    w.emplace_back(to_string(anchor_color));
    w.emplace_back(to_string(anchor_shape));
  }
  return w;
}

std::string Expression::text() const {
  std::string out;
  for (const auto& w : words()) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

void DataSpec::validate() const {
  if (image_size == 0 || grid == 0 || image_size % grid != 0) {
    throw ConfigError("data: image size " + std::to_string(image_size) + " must be a positive multiple of grid " +
                      std::to_string(grid));
  }
  if (min_objects < 1 || min_objects > max_objects) throw ConfigError("data: need 1 <= min_objects <= max_objects");
  if (max_objects > grid * grid) throw ConfigError("data: more objects than grid cells");
  if (max_tokens < 7) throw ConfigError("data: max_tokens must hold the longest expression (7)");
  if (max_retries == 0) throw ConfigError("data: max_retries must be positive");
}

bool relation_holds(Relation r, const SceneObject& subject, const SceneObject& anchor) {
  switch (r) {
    case Relation::kAbove: return subject.row < anchor.row;
    case Relation::kBelow: return subject.row > anchor.row;
    case Relation::kLeftOf: return subject.col < anchor.col;
    case Relation::kRightOf: return subject.col > anchor.col;
  }
  return false;
}

std::vector<std::size_t> referents(const std::vector<SceneObject>& objects, const Expression& expr) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (!same_kind(objects[i], expr.color, expr.shape)) continue;
    if (!expr.relation) {
      out.push_back(i);
      continue;
    }
    for (std::size_t j = 0; j < objects.size(); ++j) {
      if (j != i && same_kind(objects[j], expr.anchor_color, expr.anchor_shape) &&
          relation_holds(*expr.relation, objects[i], objects[j])) {
        out.push_back(i);
        break;
      }
    }
  }
  return out;
}

std::optional<Expression> shortest_expression(const std::vector<SceneObject>& objects, std::size_t target) {
  const auto& t = objects.at(target);
  Expression plain{t.color, t.shape, std::nullopt, Color::kRed, ShapeKind::kCircle};
  if (referents(objects, plain) == std::vector<std::size_t>{target}) return plain;
  for (Relation r : kRelationOrder) {
    for (std::size_t j = 0; j < objects.size(); ++j) {
      if (j == target) continue;
      Expression e{t.color, t.shape, r, objects[j].color, objects[j].shape};
      if (referents(objects, e) == std::vector<std::size_t>{target}) return e;
    }
  }
  return std::nullopt;
}

TokenSeq tokenize(const std::vector<std::string>& words, std::size_t max_tokens) {
  if (words.size() + 1 > max_tokens) {
    throw ContractError("expression of " + std::to_string(words.size()) + " words exceeds " +
                        std::to_string(max_tokens) + " tokens");
  }
  TokenSeq seq;
  seq.ids.assign(max_tokens, kPadToken);
  seq.pad.assign(max_tokens, 1);
  seq.ids[0] = kGlobalToken;
  seq.pad[0] = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    seq.ids[i + 1] = word_id(words[i]);
    seq.pad[i + 1] = 0;
  }
  seq.length = words.size() + 1;
  return seq;
}

BinaryMask render_object_mask(const SceneObject& obj, const DataSpec& spec) {
  const std::size_t S = spec.image_size;
  const double cell = static_cast<double>(S) / static_cast<double>(spec.grid);
  BinaryMask m(S, S);
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      m.pixels[y * S + x] = covers(obj, cell, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5) ? 1 : 0;
    }
  }
  return m;
}

Tensor<float> render_image(const std::vector<SceneObject>& objects, const DataSpec& spec) {
  const std::size_t S = spec.image_size;
  std::vector<float> px(S * S * 3, 0.0f);
  for (const auto& obj : objects) {
    const auto mask = render_object_mask(obj, spec);
    const auto& rgb = kPalette[static_cast<std::size_t>(obj.color)];
    for (std::size_t i = 0; i < S * S; ++i) {
      if (!mask.pixels[i]) continue;
      for (std::size_t c = 0; c < 3; ++c) px[i * 3 + c] = static_cast<float>(rgb[c]) / 255.0f;
    }
  }
  return Tensor<float>({S, S, 3}, std::move(px));
}

SampleRecord gen_sample(std::uint64_t seed, const DataSpec& spec) {
  spec.validate();
  const CounterRng root(seed);
  const std::size_t cells = spec.grid * spec.grid;
  for (std::size_t attempt = 0; attempt < spec.max_retries; ++attempt) {
    CounterRng rng = root.stream(attempt);
    const std::size_t n = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);
    std::vector<std::size_t> order(cells);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + rng.below(cells - i)]);
    std::vector<SceneObject> objects;
    for (std::size_t i = 0; i < n; ++i) {
      SceneObject o;
      o.row = order[i] / spec.grid;
      o.col = order[i] % spec.grid;
      o.shape = static_cast<ShapeKind>(rng.below(3));
      o.color = static_cast<Color>(rng.below(4));
      objects.push_back(o);
    }
    const std::size_t target = rng.below(n);
    auto expr = shortest_expression(objects, target);
    if (!expr) continue;
    SampleRecord s;
    s.seed = seed;
    s.objects = std::move(objects);
    s.target = target;
    s.expression = *expr;
    s.text = expr->text();
    s.tokens = tokenize(expr->words(), spec.max_tokens);
    s.gt_mask = render_object_mask(s.objects[target], spec);
    s.image = render_image(s.objects, spec);
    return s;
  }
  throw GenerationError("no unambiguous scene for seed " + std::to_string(seed) + " within " +
                        std::to_string(spec.max_retries) + " draws");
}

std::uint64_t sample_seed(std::uint64_t split_seed, std::size_t index) {
  return CounterRng(split_seed).stream(index).key();
}

std::vector<SampleRecord> gen_split(std::uint64_t split_seed, std::size_t count, const DataSpec& spec) {
  std::vector<SampleRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_sample(sample_seed(split_seed, i), spec));
  return out;
}

}  // namespace crformer
