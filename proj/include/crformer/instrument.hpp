#pragma once

// Lightweight per-thread instrumentation: primitive-op counting under named
// scopes and an observer hook for every softmax evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace crformer {

/// Tags every primitive op executed on this thread while alive. Nested tags
/// replace the outer tag until destroyed.
class ScopedTag {
 public:
  explicit ScopedTag(std::string tag);
  ~ScopedTag();
  ScopedTag(const ScopedTag&) = delete;
  ScopedTag& operator=(const ScopedTag&) = delete;

 private:
  std::string previous_;
};

const std::string& current_tag();

/// Per-tag primitive-op counts accumulated on the current thread.
class OpCounter {
 public:
  static void reset();
  static void count();
  static std::size_t count_for(const std::string& tag);
  static std::size_t total();
  static std::map<std::string, std::size_t> snapshot();
};

/// Observed softmax call. `rows` x `cols` probabilities in row-major order;
/// `keep` is empty (no mask) or one flag per column.
struct SoftmaxEvent {
  std::string tag;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> probs;
  std::vector<std::uint8_t> keep;
};

using SoftmaxObserver = std::function<void(const SoftmaxEvent&)>;

/// Installs an observer for softmax outputs on this thread while alive.
class ScopedSoftmaxObserver {
 public:
  explicit ScopedSoftmaxObserver(SoftmaxObserver observer);
  ~ScopedSoftmaxObserver();
  ScopedSoftmaxObserver(const ScopedSoftmaxObserver&) = delete;
  ScopedSoftmaxObserver& operator=(const ScopedSoftmaxObserver&) = delete;

 private:
  SoftmaxObserver previous_;
};

namespace detail {
bool softmax_observed();
void notify_softmax(SoftmaxEvent event);
}  // namespace detail

}  // namespace crformer
