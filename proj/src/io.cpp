#include "crformer/io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "crformer/error.hpp"

namespace crformer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_pnm(const std::string& path, const char* magic, std::size_t h, std::size_t w,
               const std::vector<std::uint8_t>& px) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << magic << "\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw FormatError("failed writing '" + path + "'");
}

// Header token reader that skips whitespace and '#' comments.
std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok += c;
  }
  if (tok.empty()) throw FormatError("'" + path + "': truncated header");
  return tok;
}

std::vector<std::uint8_t> read_pnm(const std::string& path, const char* magic, std::size_t channels, std::size_t& h,
                                   std::size_t& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  if (next_token(in, path) != magic) throw FormatError("'" + path + "': expected " + std::string(magic));
  try {
    w = std::stoul(next_token(in, path));
    h = std::stoul(next_token(in, path));
    if (std::stoul(next_token(in, path)) != 255) throw FormatError("'" + path + "': maxval must be 255");
  } catch (const std::logic_error&) {
    throw FormatError("'" + path + "': malformed header");
  }
  if (h == 0 || w == 0) throw FormatError("'" + path + "': empty image");
  std::vector<std::uint8_t> px(h * w * channels);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (static_cast<std::size_t>(in.gcount()) != px.size()) throw FormatError("'" + path + "': truncated pixel data");
  return px;
}

json objects_to_json(const std::vector<SceneObject>& objects) {
  json arr = json::array();
  for (const auto& o : objects) {
    arr.push_back({{"shape", std::string(to_string(o.shape))},
                   {"color", std::string(to_string(o.color))},
                   {"row", o.row},
                   {"col", o.col}});
  }
  return arr;
}

ShapeKind shape_from(const std::string& s) {
  for (auto k : {ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown shape '" + s + "'");
}

Color color_from(const std::string& s) {
  for (auto k : {Color::kRed, Color::kGreen, Color::kBlue, Color::kYellow}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown color '" + s + "'");
}

}  // namespace

void write_pgm(const std::string& path, const GrayImage& img) {
  if (img.pixels.size() != img.height * img.width) throw DimensionError("write_pgm: pixel count mismatch");
  write_pnm(path, "P5", img.height, img.width, img.pixels);
}

void write_ppm(const std::string& path, const ColorImage& img) {
  if (img.pixels.size() != img.height * img.width * 3) throw DimensionError("write_ppm: pixel count mismatch");
  write_pnm(path, "P6", img.height, img.width, img.pixels);
}

GrayImage read_pgm(const std::string& path) {
  GrayImage g;
  g.pixels = read_pnm(path, "P5", 1, g.height, g.width);
  return g;
}

ColorImage read_ppm(const std::string& path) {
  ColorImage c;
  c.pixels = read_pnm(path, "P6", 3, c.height, c.width);
  return c;
}

GrayImage mask_to_gray(const BinaryMask& m) {
  GrayImage g{m.height, m.width, std::vector<std::uint8_t>(m.pixels.size())};
  for (std::size_t i = 0; i < m.pixels.size(); ++i) g.pixels[i] = m.pixels[i] ? 255 : 0;
  return g;
}

BinaryMask gray_to_mask(const GrayImage& g) {
  BinaryMask m(g.height, g.width);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) m.pixels[i] = g.pixels[i] >= 128 ? 1 : 0;
  return m;
}

ColorImage tensor_to_color(const Tensor<float>& img) {
  if (img.rank() != 3 || img.dim(2) != 3) throw DimensionError("expected an [H,W,3] image, got " + shape_str(img.shape()));
  ColorImage c{img.dim(0), img.dim(1), std::vector<std::uint8_t>(img.numel())};
  auto v = img.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float x = std::clamp(v[i], 0.0f, 1.0f);
    c.pixels[i] = static_cast<std::uint8_t>(std::lround(x * 255.0f));
  }
  return c;
}

Tensor<float> color_to_tensor(const ColorImage& img) {
  std::vector<float> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return Tensor<float>({img.height, img.width, 3}, std::move(v));
}

std::string sample_stem(std::size_t index) {
  std::string s = std::to_string(index);
  if (s.size() < 3) s.insert(0, 3 - s.size(), '0');
  return s;
}

void export_dataset(const std::string& dir, const std::vector<SampleRecord>& samples) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  std::ofstream jsonl(fs::path(dir) / "expressions.jsonl", std::ios::trunc);
  if (!jsonl) throw FormatError("cannot write '" + dir + "/expressions.jsonl'");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto stem = sample_stem(i);
    write_ppm((fs::path(dir) / "images" / (stem + ".ppm")).string(), tensor_to_color(s.image));
    write_pgm((fs::path(dir) / "masks" / (stem + ".pgm")).string(), mask_to_gray(s.gt_mask));
    std::vector<int> ids(s.tokens.ids.begin(), s.tokens.ids.begin() + static_cast<std::ptrdiff_t>(s.tokens.length));
    json rec = {{"id", i},
                {"tokens", ids},
                {"text", s.text},
                {"seed", s.seed},
                {"max_tokens", s.tokens.capacity()},
                {"objects", objects_to_json(s.objects)},
                {"target", s.target}};
    jsonl << rec.dump() << "\n";
  }
}

std::vector<SampleRecord> load_dataset(const std::string& dir) {
  std::ifstream jsonl(fs::path(dir) / "expressions.jsonl");
  if (!jsonl) throw FormatError("cannot open '" + dir + "/expressions.jsonl'");
  std::vector<SampleRecord> out;
  std::string line;
  while (std::getline(jsonl, line)) {
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      const auto id = rec.at("id").get<std::size_t>();
      const auto ids = rec.at("tokens").get<std::vector<int>>();
      const auto capacity = rec.at("max_tokens").get<std::size_t>();
      if (ids.empty() || ids.front() != kGlobalToken) throw FormatError("sample " + std::to_string(id) + ": bad tokens");
      std::vector<std::string> words;
      for (std::size_t k = 1; k < ids.size(); ++k) words.push_back(word_text(ids[k]));
      SampleRecord s;
      s.tokens = tokenize(words, capacity);
      s.text = rec.at("text").get<std::string>();
      s.seed = rec.at("seed").get<std::uint64_t>();
      for (const auto& o : rec.at("objects")) {
        s.objects.push_back({shape_from(o.at("shape").get<std::string>()), color_from(o.at("color").get<std::string>()),
                             o.at("row").get<std::size_t>(), o.at("col").get<std::size_t>()});
      }
      s.target = rec.at("target").get<std::size_t>();
      if (s.target >= s.objects.size()) throw FormatError("sample " + std::to_string(id) + ": target out of range");
      if (auto e = shortest_expression(s.objects, s.target)) s.expression = *e;
      const auto stem = sample_stem(id);
      s.image = color_to_tensor(read_ppm((fs::path(dir) / "images" / (stem + ".ppm")).string()));
      s.gt_mask = gray_to_mask(read_pgm((fs::path(dir) / "masks" / (stem + ".pgm")).string()));
      if (s.gt_mask.height != s.image.dim(0) || s.gt_mask.width != s.image.dim(1)) {
        throw FormatError("sample " + std::to_string(id) + ": mask and image extents differ");
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw FormatError("'" + dir + "/expressions.jsonl': " + e.what());
    }
  }
  if (out.empty()) throw FormatError("dataset '" + dir + "' has no samples");
  return out;
}

}  // namespace crformer
