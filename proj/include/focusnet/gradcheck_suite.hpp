#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "focusnet/blocks.hpp"
#include "focusnet/gradcheck.hpp"
#include "focusnet/loss.hpp"
#include "focusnet/model.hpp"

namespace focusnet {

// Seeded finite-difference checks over every primitive, loss term and
// composite block. Tensor-valued outputs are reduced with a fixed random
// projection sum(out * R) so that every output element carries a distinct
// upstream gradient.

struct GradCase {
  std::string name;
  bool composite = false;  // composites check a sampled subset of elements
  std::function<GradCheckReport(std::uint64_t seed, const GradCheckOptions& opt)> run;
};

struct GradCaseResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

namespace detail {

using Leaves = std::vector<std::pair<std::string, Var>>;

inline Var leaf(Tensor t) { return Var(std::move(t), true); }

inline Var uniform_leaf(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return leaf(random_uniform(std::move(s), rng, lo, hi));
}

inline Var project(const Var& out, const Tensor& r) { return sum(mul(out, Var(r))); }

// Checks f(leaves) reduced by a random projection of its output shape.
inline GradCheckReport check_projected(const std::function<Var()>& f, Leaves leaves, Rng& rng,
                                       const GradCheckOptions& opt) {
  const Tensor r = random_uniform(f().shape(), rng);
  return grad_check([&] { return project(f(), r); }, std::move(leaves), opt);
}

// Trainable parameters of a store plus extra leaves.
inline Leaves param_leaves(const ParamStore& store, Leaves extra = {}) {
  for (const auto& e : store.entries())
    if (e.trainable) extra.emplace_back(e.name, e.var);
  return extra;
}

// Parameters start as He-uniform weights with zero biases and unit BN
// scales; randomize every trainable value so that no term is degenerate.
inline void randomize_params(ParamStore& store, Rng& rng) {
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    Var v = e.var;
    const bool scale_like = e.name.ends_with(".gamma");
    for (double& x : v.mutable_value().data())
      x = scale_like ? rng.uniform(0.5, 1.5) : x + rng.uniform(-0.3, 0.3);
  }
}

struct BlockFixture {
  std::unique_ptr<ParamStore> store = std::make_unique<ParamStore>();
  std::unique_ptr<Rng> rng;
  Builder builder() { return Builder{*store, *rng}; }
  explicit BlockFixture(std::uint64_t seed) : rng(std::make_unique<Rng>(seed)) {}
};

inline std::vector<GradCase> primitive_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name,
                      std::function<GradCheckReport(Rng&, const GradCheckOptions&)> body) {
    cases.push_back({std::move(name), false,
                     [body](std::uint64_t seed, const GradCheckOptions& opt) {
                       Rng rng(seed);
                       return body(rng, opt);
                     }});
  };

  add_case("conv2d", [](Rng& rng, const GradCheckOptions& opt) {
    const std::size_t groups = std::size_t{1} << rng.index(3);  // 1, 2, 4
    const std::size_t cin = groups * (1 + rng.index(2)), cout = groups * (1 + rng.index(2));
    const std::size_t k = rng.index(2) ? 3 : 1;
    const ConvSpec spec{k, k, cin, cout, groups, rng.index(2) == 1};
    Var x = uniform_leaf({2, cin, 4, 5}, rng), w = uniform_leaf(spec.weight_shape(), rng);
    Leaves leaves{{"x", x}, {"w", w}};
    std::optional<Var> b;
    if (spec.has_bias) {
      b = uniform_leaf({cout}, rng);
      leaves.emplace_back("b", *b);
    }
    return check_projected([&] { return conv2d(x, spec, w, b); }, leaves, rng, opt);
  });
  add_case("conv2d_direct", [](Rng& rng, const GradCheckOptions& opt) {
    ForceConvAlgo force(ConvAlgo::direct);
    const ConvSpec spec{3, 3, 2, 4, 2, true};
    Var x = uniform_leaf({2, 2, 5, 4}, rng), w = uniform_leaf(spec.weight_shape(), rng);
    Var b = uniform_leaf({4}, rng);
    return check_projected([&] { return conv2d(x, spec, w, b); },
                           {{"x", x}, {"w", w}, {"b", b}}, rng, opt);
  });
  add_case("max_pool2", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 2, 4, 6}, rng);
    return check_projected([&] { return max_pool2(x); }, {{"x", x}}, rng, opt);
  });
  add_case("upsample_repeat2", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 2, 3, 2}, rng);
    return check_projected([&] { return upsample_repeat2(x); }, {{"x", x}}, rng, opt);
  });
  add_case("relu", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({3, 7}, rng);
    return check_projected([&] { return relu(x); }, {{"x", x}}, rng, opt);
  });
  add_case("leaky_relu", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({3, 7}, rng);
    const double slope = rng.uniform(0.01, 0.5);
    return check_projected([&] { return leaky_relu(x, slope); }, {{"x", x}}, rng, opt);
  });
  add_case("sigmoid", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({3, 7}, rng, -4.0, 4.0);
    return check_projected([&] { return sigmoid(x); }, {{"x", x}}, rng, opt);
  });
  add_case("log_clamped", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({3, 7}, rng, 0.05, 1.0);
    return check_projected([&] { return log_clamped(x, kProbClamp, 1.0 - kProbClamp); },
                           {{"x", x}}, rng, opt);
  });
  add_case("scale", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 5}, rng);
    const double c = rng.uniform(-2.0, 2.0);
    return check_projected([&] { return scale(x, c); }, {{"x", x}}, rng, opt);
  });
  add_case("add_scalar", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 5}, rng);
    const double c = rng.uniform(-2.0, 2.0);
    return check_projected([&] { return add_scalar(x, c); }, {{"x", x}}, rng, opt);
  });
  add_case("add", [](Rng& rng, const GradCheckOptions& opt) {
    Var a = uniform_leaf({2, 3, 2, 2}, rng), b = uniform_leaf({2, 3, 2, 2}, rng);
    return check_projected([&] { return add(a, b); }, {{"a", a}, {"b", b}}, rng, opt);
  });
  add_case("sub", [](Rng& rng, const GradCheckOptions& opt) {
    Var a = uniform_leaf({2, 3, 2, 2}, rng), b = uniform_leaf({2, 3, 2, 2}, rng);
    return check_projected([&] { return sub(a, b); }, {{"a", a}, {"b", b}}, rng, opt);
  });
  add_case("mul", [](Rng& rng, const GradCheckOptions& opt) {
    Var a = uniform_leaf({2, 3, 2, 2}, rng), b = uniform_leaf({2, 3, 2, 2}, rng);
    return check_projected([&] { return mul(a, b); }, {{"a", a}, {"b", b}}, rng, opt);
  });
  add_case("div", [](Rng& rng, const GradCheckOptions& opt) {
    Var a = uniform_leaf({2, 3, 2, 2}, rng), b = uniform_leaf({2, 3, 2, 2}, rng, 0.5, 2.0);
    return check_projected([&] { return div(a, b); }, {{"a", a}, {"b", b}}, rng, opt);
  });
  add_case("sum", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 3, 2}, rng);
    return check_projected([&] { return sum(x); }, {{"x", x}}, rng, opt);
  });
  add_case("mean", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 3, 2}, rng);
    return check_projected([&] { return mean(x); }, {{"x", x}}, rng, opt);
  });
  add_case("global_avg_pool", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 3, 3, 2}, rng);
    return check_projected([&] { return global_avg_pool(x); }, {{"x", x}}, rng, opt);
  });
  add_case("dense", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({3, 4}, rng), w = uniform_leaf({4, 5}, rng);
    return check_projected([&] { return dense(x, w); }, {{"x", x}, {"w", w}}, rng, opt);
  });
  add_case("scale_channels", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 3, 2, 3}, rng), s = uniform_leaf({2, 3}, rng);
    return check_projected([&] { return scale_channels(x, s); }, {{"x", x}, {"s", s}}, rng,
                           opt);
  });
  add_case("concat_channels", [](Rng& rng, const GradCheckOptions& opt) {
    Var a = uniform_leaf({2, 1, 2, 3}, rng), b = uniform_leaf({2, 3, 2, 3}, rng);
    return check_projected([&] { return concat_channels({a, b, a}); }, {{"a", a}, {"b", b}},
                           rng, opt);
  });
  add_case("slice_channels", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 5, 2, 2}, rng);
    const std::size_t begin = rng.index(3);
    return check_projected([&] { return slice_channels(x, begin, 2); }, {{"x", x}}, rng, opt);
  });
  add_case("permute_channels", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 5, 2, 2}, rng);
    std::vector<std::size_t> perm{0, 1, 2, 3, 4};
    rng.shuffle(perm);
    return check_projected([&] { return permute_channels(x, perm); }, {{"x", x}}, rng, opt);
  });
  add_case("channel_shuffle", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 8, 2, 2}, rng);
    return check_projected([&] { return channel_shuffle(x, kFilterGroups); }, {{"x", x}}, rng,
                           opt);
  });
  add_case("batch_norm_train", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({3, 2, 2, 3}, rng, -2.0, 2.0);
    Var g = uniform_leaf({2}, rng, 0.5, 1.5), b = uniform_leaf({2}, rng);
    Tensor rm({2}), rv({2}, 1.0);
    return check_projected([&] { return batch_norm(x, g, b, rm, rv, Mode::train); },
                           {{"x", x}, {"gamma", g}, {"beta", b}}, rng, opt);
  });
  add_case("batch_norm_eval", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 2, 2, 3}, rng);
    Var g = uniform_leaf({2}, rng, 0.5, 1.5), b = uniform_leaf({2}, rng);
    Tensor rm = random_uniform({2}, rng), rv = random_uniform({2}, rng, 0.5, 2.0);
    return check_projected([&] { return batch_norm(x, g, b, rm, rv, Mode::eval); },
                           {{"x", x}, {"gamma", g}, {"beta", b}}, rng, opt);
  });
  add_case("dropout", [](Rng& rng, const GradCheckOptions& opt) {
    Var x = uniform_leaf({2, 3, 2, 2}, rng);
    const std::uint64_t seed = rng.next();
    return check_projected([&] { return dropout(x, 0.5, Mode::train, seed); }, {{"x", x}}, rng,
                           opt);
  });
  return cases;
}

inline std::vector<GradCase> loss_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name,
                      std::function<GradCheckReport(Rng&, const GradCheckOptions&)> body) {
    cases.push_back({std::move(name), false,
                     [body](std::uint64_t seed, const GradCheckOptions& opt) {
                       Rng rng(seed);
                       return body(rng, opt);
                     }});
  };
  auto mask = [](Rng& rng) {
    Tensor m({2, 1, 3, 3});
    for (double& v : m.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    m[0] = 1.0;
    m[1] = 0.0;
    return m;
  };
  add_case("bace", [mask](Rng& rng, const GradCheckOptions& opt) {
    Var p = uniform_leaf({2, 1, 3, 3}, rng, 0.05, 0.95);
    const Tensor y = mask(rng);
    return grad_check([&] { return bace(p, y, 0.7); }, {{"p_hat", p}}, opt);
  });
  add_case("tversky_loss", [mask](Rng& rng, const GradCheckOptions& opt) {
    Var p = uniform_leaf({2, 1, 3, 3}, rng, 0.05, 0.95);
    const Tensor y = mask(rng);
    return grad_check([&] { return tversky_loss(p, y, 0.3, 0.7); }, {{"p_hat", p}}, opt);
  });
  add_case("hybrid_loss", [mask](Rng& rng, const GradCheckOptions& opt) {
    Var p = uniform_leaf({2, 1, 3, 3}, rng, 0.05, 0.95);
    const Tensor y = mask(rng);
    return grad_check([&] { return hybrid_loss(p, y, LossConfig{}); }, {{"p_hat", p}}, opt);
  });
  add_case("all_wrap", [](Rng& rng, const GradCheckOptions& opt) {
    // Both branches, staying clear of the switch point |HL| = gamma.
    const double v = rng.index(2) ? rng.uniform(0.01, 0.09) : rng.uniform(0.12, 2.0);
    Var h = leaf(Tensor::scalar(rng.index(2) ? v : -v));
    return grad_check([&] { return all_wrap(h, LossConfig{}); }, {{"hl", h}}, opt);
  });
  add_case("segmentation_loss", [mask](Rng& rng, const GradCheckOptions& opt) {
    Var p = uniform_leaf({2, 1, 3, 3}, rng, 0.05, 0.95);
    const Tensor y = mask(rng);
    return grad_check([&] { return segmentation_loss(p, y, LossConfig{}); }, {{"p_hat", p}},
                      opt);
  });
  return cases;
}

inline std::vector<GradCase> composite_cases() {
  std::vector<GradCase> cases;
  // body(fixture, x) builds the block into the fixture and returns its forward.
  using Forward = std::function<Var(const Var&)>;
  auto add_case = [&](std::string name, Shape input,
                      std::function<Forward(BlockFixture&)> build) {
    cases.push_back({std::move(name), true,
                     [input, build](std::uint64_t seed, const GradCheckOptions& opt) {
                       BlockFixture fx(seed);
                       const Forward fwd = build(fx);
                       randomize_params(*fx.store, *fx.rng);
                       Var x = uniform_leaf(input, *fx.rng);
                       return check_projected([&] { return fwd(x); },
                                              param_leaves(*fx.store, {{"x", x}}), *fx.rng, opt);
                     }});
  };
  const Context train{Mode::train, 11};
  BlockOptions small;
  small.se_reduction = 2;

  add_case("squeeze_excite", {2, 4, 3, 3}, [](BlockFixture& fx) -> Forward {
    Builder b = fx.builder();
    auto se = SqueezeExcite::make(b, "se", 4, 2);
    return [se](const Var& x) { return se(x); };
  });
  add_case("focusnet_attention", {2, 4, 4, 4}, [small](BlockFixture& fx) -> Forward {
    Builder b = fx.builder();
    auto m = FocusNetAttention::make(b, "attn", 4, small);
    return [m](const Var& x) { return m(x); };
  });
  add_case("attention_subblock", {2, 2, 4, 4}, [small, train](BlockFixture& fx) -> Forward {
    Builder b = fx.builder();
    auto m = AttentionSubblock::make(b, "a", 2, small);
    return [m, train](const Var& x) { return attention_subblock(x, m, train); };
  });
  add_case("residual_subblock", {2, 2, 4, 4}, [small, train](BlockFixture& fx) -> Forward {
    Builder b = fx.builder();
    auto m = ResidualSubblock::make(b, "r", 2, small);
    return [m, train](const Var& x) { return residual_subblock(x, m, train); };
  });
  const std::pair<const char*, std::pair<CombineMode, PairMode>> group_modes[] = {
      {"group_attention_block", {CombineMode::permutation_equivariant_1x1, PairMode::hadamard}},
      {"group_attention_block_shuffle", {CombineMode::channel_shuffle, PairMode::hadamard}},
      {"group_attention_block_concat",
       {CombineMode::permutation_equivariant_1x1, PairMode::concat_horizontal}},
  };
  for (const auto& [name, modes] : group_modes) {
    const auto [cm, pm] = modes;
    add_case(name, {2, 4, 4, 4}, [small, train, cm, pm](BlockFixture& fx) -> Forward {
      Builder b = fx.builder();
      auto m = GroupAttentionBlock::make(b, "g", 4, 8, small, cm, pm);
      return [m, train](const Var& x) { return group_attention_block(x, m, train); };
    });
  }
  for (BlockKind kind : {BlockKind::basic, BlockKind::identity_preact, BlockKind::resnext,
                         BlockKind::resnext_se, BlockKind::res_a}) {
    add_case(std::string("variant_block_") + std::string(block_kind_name(kind)), {2, 4, 4, 4},
             [small, train, kind](BlockFixture& fx) -> Forward {
               Builder b = fx.builder();
               auto m = VariantBlock::make(b, "v", kind, 4, 8, small, true);
               return [m, train](const Var& x) { return variant_block(x, m, train); };
             });
  }
  return cases;
}

}  // namespace detail

/// Every gradient-check case: primitives, loss terms, then composite blocks.
inline std::vector<GradCase> gradcheck_cases() {
  std::vector<GradCase> all = detail::primitive_cases();
  for (auto& c : detail::loss_cases()) all.push_back(std::move(c));
  for (auto& c : detail::composite_cases()) all.push_back(std::move(c));
  return all;
}

/// Runs `instances` seeds of one case; seeds are mix_seed(base_seed, i).
inline GradCaseResult run_grad_case(const GradCase& c, std::size_t instances,
                                    std::uint64_t base_seed, GradCheckOptions opt) {
  GradCaseResult r;
  r.name = c.name;
  if (c.composite && opt.max_elements_per_leaf == 0) opt.max_elements_per_leaf = 6;
  for (std::size_t i = 0; i < instances; ++i) {
    opt.sample_seed = mix_seed(base_seed ^ 0xC0FFEEULL, i);
    const GradCheckReport rep = c.run(mix_seed(base_seed, i), opt);
    ++r.instances;
    r.checked += rep.checked;
    r.nonsmooth += rep.nonsmooth;
    r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
  }
  // The kink allowance applies to the case as a whole: a single kink among a
  // sampled instance's few hundred elements says nothing about correctness.
  r.passed = r.max_rel_error < opt.tol &&
             static_cast<double>(r.nonsmooth) <=
                 opt.max_nonsmooth_fraction * static_cast<double>(r.checked);
  return r;
}

}  // namespace focusnet
