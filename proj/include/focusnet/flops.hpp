#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace focusnet {

/// FLOP convention:
///   conv2d      2*Kh*Kw*(Cin/groups)*Cout*Hout*Wout (+ Cout*Hout*Wout with bias)
///   dense       2*Cin*Cout per batch row (the squeeze-excite stages)
///   elementwise 1 per output value (activations, add, hadamard, batch norm,
///               channel scaling, dropout, max-pool, log, division)
///   global average pool: 1 per input value
///   data movement (upsample, concat, slice, channel permutation): 0
/// Multiplies and adds are counted separately, hence the factor 2.
class FlopCounter {
 public:
  struct Entry {
    std::string scope;
    std::string kind;
    std::uint64_t flops = 0;
  };

  void add(const char* kind, std::uint64_t flops) {
    total_ += flops;
    const std::string scope = current_scope();
    if (!entries_.empty() && entries_.back().scope == scope &&
        entries_.back().kind == kind) {
      entries_.back().flops += flops;
      return;
    }
    entries_.push_back({scope, kind, flops});
  }

  void push(std::string name) { scopes_.push_back(std::move(name)); }
  void pop() { scopes_.pop_back(); }

  /// Scopes carry full dotted names; the innermost one wins.
  std::string current_scope() const {
    return scopes_.empty() ? std::string("(top)") : scopes_.back();
  }

  std::uint64_t total() const noexcept { return total_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

 private:
  std::vector<std::string> scopes_;
  std::vector<Entry> entries_;
  std::uint64_t total_ = 0;
};

namespace detail {
inline FlopCounter*& active_counter() {
  thread_local FlopCounter* counter = nullptr;
  return counter;
}
inline void count_flops(const char* kind, std::uint64_t flops) {
  if (FlopCounter* c = active_counter()) c->add(kind, flops);
}
}  // namespace detail

/// Installs a counter for the current thread for the lifetime of the guard.
class CountFlops {
 public:
  explicit CountFlops(FlopCounter& counter) : prev_(detail::active_counter()) {
    detail::active_counter() = &counter;
  }
  ~CountFlops() { detail::active_counter() = prev_; }
  CountFlops(const CountFlops&) = delete;
  CountFlops& operator=(const CountFlops&) = delete;

 private:
  FlopCounter* prev_;
};

/// Names the layer that subsequent FLOPs are attributed to. No-op when no
/// counter is installed.
class FlopScope {
 public:
  explicit FlopScope(const std::string& name) : counter_(detail::active_counter()) {
    if (counter_) counter_->push(name);
  }
  ~FlopScope() {
    if (counter_) counter_->pop();
  }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* counter_;
};

}  // namespace focusnet
