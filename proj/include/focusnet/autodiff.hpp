#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "focusnet/tensor.hpp"

namespace focusnet {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One recorded primitive application (or a leaf). `backward` reads `grad`
/// of this node and accumulates into the grads of `inputs`.
struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;  // record order; leaves carry 0
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const noexcept { return inputs.empty(); }

  /// Gradient buffer, allocated as zeros on first use.
  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

namespace detail {
inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

/// Per-op wall time. Forward time of an op is the time since the previous
/// record() on this thread, so install the profiler right before a forward.
class OpProfile {
 public:
  struct Stat {
    double forward_ms = 0.0, backward_ms = 0.0;
    std::size_t calls = 0;
  };
  using Clock = std::chrono::steady_clock;

  OpProfile() : saved_(active()), last_(Clock::now()) { active() = this; }
  ~OpProfile() { active() = saved_; }
  OpProfile(const OpProfile&) = delete;
  OpProfile& operator=(const OpProfile&) = delete;

  const std::map<std::string, Stat>& stats() const noexcept { return stats_; }

  static OpProfile*& active() {
    thread_local OpProfile* p = nullptr;
    return p;
  }

  void forward_done(const char* op) {
    const auto now = Clock::now();
    Stat& s = stats_[op];
    s.forward_ms += std::chrono::duration<double, std::milli>(now - last_).count();
    ++s.calls;
    last_ = now;
  }

  void backward_done(const char* op, Clock::time_point start) {
    last_ = Clock::now();
    stats_[op].backward_ms += std::chrono::duration<double, std::milli>(last_ - start).count();
  }

 private:
  OpProfile* saved_;
  Clock::time_point last_;
  std::map<std::string, Stat> stats_;
};

/// Handle to a node of the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  /// In-place access for optimizers and loaders; never use on a node that is
  /// still referenced by an unfinished tape.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(0.0);
  }

  const NodePtr& node() const noexcept { return node_; }

  void backward() const;

 private:
  NodePtr node_;
};

/// Creates the output node of a primitive. The node is only wired into the
/// graph when at least one input requires a gradient.
inline Var record(Tensor value, std::vector<Var> inputs, const char* op,
                  std::function<void(Node&)> backward) {
  if (OpProfile* p = OpProfile::active()) p->forward_done(op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  for (const Var& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->seq = detail::next_seq();
    node->inputs.reserve(inputs.size());
    for (const Var& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

/// Recorded primitives reachable from a root, in record order.
class Tape {
 public:
  static Tape collect(const Var& root) {
    Tape tape;
    std::unordered_set<const Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      if (!n->requires_grad || n->is_leaf() || !seen.insert(n).second) continue;
      tape.nodes_.push_back(n);
      for (const NodePtr& in : n->inputs) stack.push_back(in.get());
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const Node* a, const Node* b) { return a->seq < b->seq; });
    return tape;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node*>& nodes() const noexcept { return nodes_; }

  /// Reverse replay. Intermediate gradients are released once propagated;
  /// leaf gradients accumulate.
  void backward(const Var& root, const Tensor& seed) const {
    Node& r = *root.node();
    require(seed.shape() == r.value.shape(), Errc::shape,
            "backward seed shape mismatch");
    Tensor& g = r.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = *it;
      if (n->grad.empty()) continue;
      OpProfile* prof = OpProfile::active();
      const auto start = prof ? OpProfile::Clock::now() : OpProfile::Clock::time_point{};
      n->backward(*n);
      n->grad = Tensor();
      if (prof) prof->backward_done(n->op, start);
    }
  }

 private:
  std::vector<Node*> nodes_;
};

inline void Var::backward() const {
  require(node_->value.size() == 1, Errc::shape,
          "backward() requires a scalar root, got " +
              shape_str(node_->value.shape()));
  if (!node_->requires_grad) return;
  Tape::collect(*this).backward(*this, Tensor(node_->value.shape(), 1.0));
}

/// Accumulates `delta` into the gradient of input `i` of `node` if that
/// input requires a gradient; returns nullptr otherwise.
inline Tensor* input_grad(Node& node, std::size_t i) {
  Node& in = *node.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

}  // namespace focusnet
