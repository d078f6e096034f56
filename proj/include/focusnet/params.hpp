#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "focusnet/ops.hpp"

namespace focusnet {

/// Named tensors of a model in declaration order. Trainable entries are
/// gradient leaves; buffers (batch-norm running statistics) are not.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var var;
    bool trainable = true;
  };

  Var add(const std::string& name, Tensor init, bool trainable = true) {
    require(!index_.contains(name), Errc::config,
            "duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({name, Var(std::move(init), trainable), trainable});
    return entries_.back().var;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), Errc::config, "unknown parameter '" + name + "'");
    return entries_[it->second];
  }
  Var get(const std::string& name) const { return entry(name).var; }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::vector<Var> trainable() const {
    std::vector<Var> out;
    for (const auto& e : entries_)
      if (e.trainable) out.push_back(e.var);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.trainable) e.var.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// He-style fan-in uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return random_uniform(std::move(shape), rng, -bound, bound);
}

/// Build-time context shared by all layer constructors.
struct Builder {
  ParamStore& store;
  Rng& rng;
};

/// Evaluation context threaded through forward passes.
struct Context {
  Mode mode = Mode::eval;
  std::uint64_t dropout_seed = 0;
};

// ---------------------------------------------------------------------------
// Layers. Each owns handles into the ParamStore and is named by its prefix.

struct Conv2d {
  std::string name;
  ConvSpec spec;
  Var weight;
  std::optional<Var> bias;

  static Conv2d make(Builder& b, const std::string& name, const ConvSpec& spec) {
    spec.validate();
    Conv2d c;
    c.name = name;
    c.spec = spec;
    const std::size_t fan_in = spec.in_per_group() * spec.kernel_h * spec.kernel_w;
    c.weight = b.store.add(name + ".weight", he_uniform(spec.weight_shape(), fan_in, b.rng));
    if (spec.has_bias) c.bias = b.store.add(name + ".bias", Tensor::zeros({spec.out_channels}));
    return c;
  }

  Var operator()(const Var& x) const {
    FlopScope scope(name);
    return conv2d(x, spec, weight, bias);
  }
};

inline ConvSpec conv_spec(std::size_t kernel, std::size_t in, std::size_t out,
                          bool bias, std::size_t groups = 1) {
  return ConvSpec{kernel, kernel, in, out, groups, bias};
}

struct BatchNorm2d {
  std::string name;
  Var gamma, beta;
  Var running_mean, running_var;
  BatchNormOptions options;

  static BatchNorm2d make(Builder& b, const std::string& name, std::size_t channels,
                          BatchNormOptions options = {}) {
    BatchNorm2d bn;
    bn.name = name;
    bn.options = options;
    bn.gamma = b.store.add(name + ".gamma", Tensor::full({channels}, 1.0));
    bn.beta = b.store.add(name + ".beta", Tensor::zeros({channels}));
    bn.running_mean = b.store.add(name + ".running_mean", Tensor::zeros({channels}), false);
    bn.running_var = b.store.add(name + ".running_var", Tensor::full({channels}, 1.0), false);
    return bn;
  }

  Var operator()(const Var& x, const Context& ctx) const {
    FlopScope scope(name);
    // Running buffers are shared handles; mutation is visible to the store.
    Var rm = running_mean, rv = running_var;
    return batch_norm(x, gamma, beta, rm.mutable_value(), rv.mutable_value(),
                      ctx.mode, options);
  }
};

struct Dense {
  std::string name;
  Var weight;  // (in, out)

  static Dense make(Builder& b, const std::string& name, std::size_t in, std::size_t out) {
    Dense d;
    d.name = name;
    d.weight = b.store.add(name + ".weight", he_uniform({in, out}, in, b.rng));
    return d;
  }

  Var operator()(const Var& x) const {
    FlopScope scope(name);
    return dense(x, weight);
  }
};

}  // namespace focusnet
