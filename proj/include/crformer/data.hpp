#pragma once

// Synthetic referring-segmentation scenes: colored shapes on a cell grid with
// the shortest expression that singles out one of them.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "crformer/encoders.hpp"
#include "crformer/metrics.hpp"
#include "crformer/tensor.hpp"

namespace crformer {

enum class ShapeKind { kCircle, kSquare, kTriangle };
enum class Color { kRed, kGreen, kBlue, kYellow };
enum class Relation { kAbove, kBelow, kLeftOf, kRightOf };

inline constexpr int kGlobalToken = 0;
inline constexpr int kPadToken = 1;

/// Token ids: 0 global slot, 1 pad, then the words below in order.
const std::vector<std::string>& vocabulary();
std::size_t vocab_size();
int word_id(std::string_view word);  // throws FormatError for unknown words
const std::string& word_text(int id);

std::string_view to_string(ShapeKind s);
std::string_view to_string(Color c);

struct SceneObject {
  ShapeKind shape = ShapeKind::kCircle;
  Color color = Color::kRed;
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const SceneObject&) const = default;
};

struct Expression {
  Color color = Color::kRed;
  ShapeKind shape = ShapeKind::kCircle;
  std::optional<Relation> relation;
  Color anchor_color = Color::kRed;
  ShapeKind anchor_shape = ShapeKind::kCircle;

  std::vector<std::string> words() const;
  std::string text() const;
  bool operator==(const Expression&) const = default;
};

struct DataSpec {
  std::size_t image_size = 64;
  std::size_t grid = 4;  // cells per side
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  std::size_t max_tokens = 20;
  std::size_t max_retries = 64;

  /// Throws ConfigError for impossible combinations.
  void validate() const;
};

struct SampleRecord {
  Tensor<float> image;  // [H, W, 3], values k/255
  TokenSeq tokens;
  BinaryMask gt_mask;
  std::uint64_t seed = 0;
  std::vector<SceneObject> objects;
  std::size_t target = 0;
  Expression expression;
  std::string text;
};

/// Subject relative to anchor, by grid cell.
bool relation_holds(Relation r, const SceneObject& subject, const SceneObject& anchor);

/// Indices of every object the expression describes.
std::vector<std::size_t> referents(const std::vector<SceneObject>& objects, const Expression& expr);

/// Shortest expression (by word count) whose only referent is `target`, or
/// nullopt when none exists.
std::optional<Expression> shortest_expression(const std::vector<SceneObject>& objects, std::size_t target);

/// Global slot followed by the expression words, padded to max_tokens.
/// Throws ContractError when the expression does not fit.
TokenSeq tokenize(const std::vector<std::string>& words, std::size_t max_tokens);

/// Pixel coverage of one object (pixel centers tested against the shape).
BinaryMask render_object_mask(const SceneObject& obj, const DataSpec& spec);
Tensor<float> render_image(const std::vector<SceneObject>& objects, const DataSpec& spec);

/// Deterministic in (seed, spec). Throws GenerationError when no scene with
/// an unambiguous expression is found within spec.max_retries draws.
SampleRecord gen_sample(std::uint64_t seed, const DataSpec& spec);

/// Seed of sample `index` in a split keyed by `split_seed`.
std::uint64_t sample_seed(std::uint64_t split_seed, std::size_t index);
std::vector<SampleRecord> gen_split(std::uint64_t split_seed, std::size_t count, const DataSpec& spec);

}  // namespace crformer
