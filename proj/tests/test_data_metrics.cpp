#include <doctest.h>

#include <filesystem>
#include <set>

#include "crformer/data.hpp"
#include "crformer/error.hpp"
#include "crformer/heads.hpp"
#include "crformer/io.hpp"
#include "crformer/metrics.hpp"
#include "metric_oracle.hpp"
#include "test_util.hpp"

using namespace crformer;

namespace {

namespace fs = std::filesystem;

// Independent reading of an expression's words against a scene.
std::vector<std::size_t> enumerate_referents(const std::vector<SceneObject>& objs, const std::vector<std::string>& words) {
  auto kind = [](const SceneObject& o, const std::string& color, const std::string& shape) {
    return to_string(o.color) == color && to_string(o.shape) == shape;
  };
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    if (!kind(objs[i], words[0], words[1])) continue;
    if (words.size() == 2) {
      out.push_back(i);
      continue;
    }
    const bool two_word = words[2] == "left" || words[2] == "right";
    const std::string rel = words[2];
    const std::string& ac = words[two_word ? 4 : 3];
    const std::string& as = words[two_word ? 5 : 4];
    for (std::size_t j = 0; j < objs.size(); ++j) {
      if (j == i || !kind(objs[j], ac, as)) continue;
      const auto& s = objs[i];
      const auto& a = objs[j];
      const bool holds = (rel == "above" && s.row < a.row) || (rel == "below" && s.row > a.row) ||
                         (rel == "left" && s.col < a.col) || (rel == "right" && s.col > a.col);
      if (holds) {
        out.push_back(i);
        break;
      }
    }
  }
  return out;
}

BinaryMask mask_from(std::size_t h, std::size_t w, std::initializer_list<int> bits) {
  BinaryMask m(h, w);
  std::size_t i = 0;
  for (int b : bits) m.pixels[i++] = static_cast<std::uint8_t>(b);
  return m;
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("crformer_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  CHECK(word_text(kGlobalToken) == "<global>");
  CHECK(word_text(kPadToken) == "<pad>");
  CHECK(vocab_size() == vocabulary().size());
  CHECK(vocab_size() <= 64);
  for (std::size_t i = 0; i < vocab_size(); ++i) {
    const int id = static_cast<int>(i);
    if (id == kGlobalToken || id == kPadToken) continue;
    CHECK(word_id(word_text(id)) == id);
  }
  CHECK_THROWS_AS(word_id("<pad>"), FormatError);
  CHECK_THROWS_AS(word_id("purple"), FormatError);
}

TEST_CASE("tokenize places the global slot first and pads the tail") {
  const auto t = tokenize({"red", "circle"}, 6);
  CHECK(t.ids == std::vector<int>{kGlobalToken, word_id("red"), word_id("circle"), kPadToken, kPadToken, kPadToken});
  CHECK(t.pad == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1});
  CHECK(t.length == 3);
  CHECK_THROWS_AS(tokenize({"red", "circle", "left", "of", "blue", "square"}, 6), ContractError);
}

TEST_CASE("gen_sample is deterministic") {
  const DataSpec spec;
  for (std::uint64_t seed : {1u, 77u, 12345u}) {
    const auto a = gen_sample(seed, spec), b = gen_sample(seed, spec);
    CHECK(a.image.to_vector() == b.image.to_vector());
    CHECK(a.tokens.ids == b.tokens.ids);
    CHECK(a.gt_mask == b.gt_mask);
    CHECK(a.objects == b.objects);
    CHECK(a.text == b.text);
  }
}

TEST_CASE("single-object scenes need no relation") {
  DataSpec spec;
  spec.min_objects = spec.max_objects = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = gen_sample(seed, spec);
    CHECK(s.expression.words().size() == 2);
    CHECK_FALSE(s.expression.relation.has_value());
  }
}

TEST_CASE("duplicates force a relation clause") {
  const std::vector<SceneObject> objs{{ShapeKind::kCircle, Color::kRed, 0, 0},
                                      {ShapeKind::kCircle, Color::kRed, 2, 1},
                                      {ShapeKind::kSquare, Color::kBlue, 1, 3}};
  for (std::size_t target : {0u, 1u}) {
    const auto e = shortest_expression(objs, target);
    REQUIRE(e.has_value());
    CHECK(e->relation.has_value());
    CHECK(enumerate_referents(objs, e->words()) == std::vector<std::size_t>{target});
  }
  CHECK_FALSE(shortest_expression({{ShapeKind::kCircle, Color::kRed, 1, 1}, {ShapeKind::kCircle, Color::kRed, 1, 1}}, 0));
}

TEST_CASE("generated expressions are unambiguous over 500 seeds") {
  const DataSpec spec;
  std::size_t with_relation = 0;
  for (std::size_t i = 0; i < 500; ++i) {
    const auto s = gen_sample(sample_seed(99, i), spec);
    const auto words = s.expression.words();
    CHECK(enumerate_referents(s.objects, words) == std::vector<std::size_t>{s.target});
    with_relation += s.expression.relation.has_value();
    std::set<std::pair<std::size_t, std::size_t>> cells;
    for (const auto& o : s.objects) cells.insert({o.row, o.col});
    CHECK(cells.size() == s.objects.size());
    CHECK(s.objects.size() >= spec.min_objects);
    CHECK(s.objects.size() <= spec.max_objects);
    CHECK(s.tokens.capacity() == spec.max_tokens);
    CHECK(s.tokens.length == words.size() + 1);
  }
  CHECK(with_relation > 0);
}

TEST_CASE("gt mask covers exactly the target's pixels") {
  const DataSpec spec;
  for (std::size_t i = 0; i < 50; ++i) {
    const auto s = gen_sample(sample_seed(5, i), spec);
    CHECK(s.gt_mask == render_object_mask(s.objects[s.target], spec));
    CHECK(s.gt_mask.count() > 0);
    const std::size_t cell = spec.image_size / spec.grid;
    const auto& t = s.objects[s.target];
    for (std::size_t y = 0; y < spec.image_size; ++y) {
      for (std::size_t x = 0; x < spec.image_size; ++x) {
        if (!s.gt_mask.pixels[y * spec.image_size + x]) continue;
        CHECK(y / cell == t.row);
        CHECK(x / cell == t.col);
        double lum = 0;
        for (std::size_t c = 0; c < 3; ++c) lum += s.image.at({y, x, c});
        CHECK(lum > 0.0);
      }
    }
    for (float v : s.image.to_vector()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("impossible specs fail") {
  DataSpec spec;
  spec.min_objects = 5;
  spec.max_objects = 4;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  DataSpec crowded;
  crowded.grid = 1;
  crowded.min_objects = crowded.max_objects = 2;
  CHECK_THROWS(gen_sample(1, crowded));
}

TEST_CASE("iou examples") {
  const auto a = mask_from(2, 2, {1, 1, 0, 0});
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, mask_from(2, 2, {0, 0, 1, 1})) == 0.0);
  const auto p = mask_from(4, 4, {1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  const auto g = mask_from(4, 4, {0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  CHECK(iou(p, g) == 0.6);
  CHECK(iou(BinaryMask(3, 3), BinaryMask(3, 3)) == 1.0);
  CHECK(iou(BinaryMask(2, 2), a) == 0.0);
  CHECK_THROWS_AS(iou(BinaryMask(2, 2), BinaryMask(2, 3)), DimensionError);
}

TEST_CASE("miou and pr examples") {
  const auto a = mask_from(2, 2, {1, 0, 1, 1});
  const std::vector<MaskPair> same{{a, a}, {a, a}};
  CHECK(miou(same) == 1.0);
  for (const auto& [x, v] : pr_at_x(same)) CHECK(v == 1.0);
  const auto r = report_from_ious({0.55, 0.65});
  CHECK(r.precision.at(0.5) == 1.0);
  CHECK(r.precision.at(0.6) == 0.5);
  CHECK(r.precision.at(0.7) == 0.0);
  CHECK(report_from_ious({0.6}).precision.at(0.6) == 0.0);
  CHECK_THROWS_AS(miou(std::vector<MaskPair>{}), ContractError);
  CHECK_THROWS_AS(pr_at_x(std::vector<MaskPair>{}), ContractError);
  std::set<double> keys;
  for (const auto& [x, v] : r.precision) keys.insert(x);
  CHECK(keys == std::set<double>{0.5, 0.6, 0.7, 0.8, 0.9});
}

TEST_CASE("metrics match brute-force pixel counting exactly") {
  const auto pairs = testutil::random_mask_pairs(2718, 100);
  CHECK(miou(pairs) == testutil::brute_miou(pairs));
  CHECK(pr_at_x(pairs) == testutil::brute_pr(pairs));
  const auto report = make_report(pairs);
  CHECK(report.miou == testutil::brute_miou(pairs));
  CHECK(report.precision == testutil::brute_pr(pairs));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(report.ious[i] == testutil::count_iou(pairs[i].pred, pairs[i].gt).value());
    CHECK(iou(pairs[i].pred, pairs[i].gt) == iou(pairs[i].gt, pairs[i].pred));
    CHECK(report.ious[i] >= 0.0);
    CHECK(report.ious[i] <= 1.0);
  }
  double prev = 1.0;
  for (const auto& [x, v] : report.precision) {
    CHECK(v <= prev);
    prev = v;
  }
}

TEST_CASE("binarize is a strict positive test") {
  const auto m = binarize(Tensor<double>({1, 3}, {0.0, 3.0, -3.0}));
  CHECK(m.pixels == std::vector<std::uint8_t>{0, 1, 0});
  CounterRng rng(3);
  const auto heads = make_heads<double>(rng, 8, 8);
  const auto logits = mask_head(testutil::random_tensor(rng, {8, 8, 8}), heads);
  const auto b = binarize(logits);
  CHECK(b.height == 64);
  CHECK(b.width == 64);
  const auto back = mask_to_tensor<double>(m);
  CHECK(back.to_vector() == std::vector<double>{0, 1, 0});
}

TEST_CASE("pgm and ppm round trip") {
  const auto dir = temp_dir("pnm");
  GrayImage g{3, 2, {0, 255, 128, 7, 9, 200}};
  write_pgm((dir / "a.pgm").string(), g);
  const auto g2 = read_pgm((dir / "a.pgm").string());
  CHECK(g2.height == 3);
  CHECK(g2.width == 2);
  CHECK(g2.pixels == g.pixels);
  ColorImage c{1, 2, {1, 2, 3, 4, 5, 6}};
  write_ppm((dir / "a.ppm").string(), c);
  CHECK(read_ppm((dir / "a.ppm").string()).pixels == c.pixels);
  CHECK_THROWS_AS(read_pgm((dir / "a.ppm").string()), FormatError);
  CHECK_THROWS_AS(read_pgm((dir / "missing.pgm").string()), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("dataset export round trip") {
  const auto dir = temp_dir("export");
  const auto samples = gen_split(4, 6, DataSpec{});
  export_dataset(dir.string(), samples);
  CHECK(fs::exists(dir / "images" / "000.ppm"));
  CHECK(fs::exists(dir / "masks" / "005.pgm"));
  CHECK(fs::exists(dir / "expressions.jsonl"));
  const auto gray = read_pgm((dir / "masks" / "000.pgm").string());
  for (auto v : gray.pixels) CHECK((v == 0 || v == 255));
  const auto back = load_dataset(dir.string());
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].image.to_vector() == samples[i].image.to_vector());
    CHECK(back[i].gt_mask == samples[i].gt_mask);
    CHECK(back[i].tokens.ids == samples[i].tokens.ids);
    CHECK(back[i].text == samples[i].text);
    CHECK(back[i].seed == samples[i].seed);
    CHECK(back[i].objects == samples[i].objects);
  }
  fs::remove_all(dir);
}
