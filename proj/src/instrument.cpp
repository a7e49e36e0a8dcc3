#include "crformer/instrument.hpp"

#include <utility>

namespace crformer {
namespace {

thread_local std::string g_tag = "";
thread_local std::map<std::string, std::size_t> g_counts;
thread_local SoftmaxObserver g_observer;

}  // namespace

ScopedTag::ScopedTag(std::string tag) : previous_(std::exchange(g_tag, std::move(tag))) {}

ScopedTag::~ScopedTag() { g_tag = std::move(previous_); }

const std::string& current_tag() { return g_tag; }

void OpCounter::reset() { g_counts.clear(); }

void OpCounter::count() { ++g_counts[g_tag]; }

std::size_t OpCounter::count_for(const std::string& tag) {
  auto it = g_counts.find(tag);
  return it == g_counts.end() ? 0 : it->second;
}

std::size_t OpCounter::total() {
  std::size_t n = 0;
  for (const auto& [tag, c] : g_counts) n += c;
  return n;
}

std::map<std::string, std::size_t> OpCounter::snapshot() { return g_counts; }

ScopedSoftmaxObserver::ScopedSoftmaxObserver(SoftmaxObserver observer)
    : previous_(std::exchange(g_observer, std::move(observer))) {}

ScopedSoftmaxObserver::~ScopedSoftmaxObserver() { g_observer = std::move(previous_); }

namespace detail {

bool softmax_observed() { return static_cast<bool>(g_observer); }

void notify_softmax(SoftmaxEvent event) {
  if (g_observer) {
    event.tag = g_tag;
    g_observer(event);
  }
}

}  // namespace detail
}  // namespace crformer
