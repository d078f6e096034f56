#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "focusnet/autodiff.hpp"

namespace focusnet {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-6;
  /// Denominator floor of the relative error, max(|analytic|, |numeric|, floor).
  /// Central differences at eps=1e-5 carry ~1e-10 absolute round-off, so
  /// relative errors of gradients far below this floor are not meaningful.
  double abs_floor = 1e-3;
  /// 0 checks every element; otherwise a seeded random subset per leaf.
  std::size_t max_elements_per_leaf = 0;
  std::uint64_t sample_seed = 0;
  /// A check with more kink-straddling elements than this fraction fails.
  double max_nonsmooth_fraction = 0.01;
};

struct LeafCheck {
  std::string name;
  std::size_t checked = 0;
  /// Elements whose stencil straddles a kink (relu, max-pool switch): the
  /// differences at eps and eps/2 disagree, or agree only because the kink
  /// lies inside both stencils (the one-sided slope gap does not shrink with
  /// eps). No finite difference is a valid reference there.
  std::size_t nonsmooth = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<LeafCheck> leaves;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;
  bool passed = false;
};

/// Compares tape gradients of the scalar `f` with central finite differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every element of every leaf. `f` must
/// rebuild its graph from the current leaf values on each call.
inline GradCheckReport grad_check(const std::function<Var()>& f,
                                  std::vector<std::pair<std::string, Var>> leaves,
                                  const GradCheckOptions& opt = {}) {
  auto evaluate = [&f]() {
    const Var out = f();
    require(out.value().size() == 1, Errc::shape,
            "grad_check: function must be scalar-valued");
    const double v = out.item();
    require(std::isfinite(v), Errc::numeric,
            "grad_check: non-finite function value");
    return v;
  };

  for (auto& [name, leaf] : leaves) {
    require(leaf.requires_grad(), Errc::argument,
            "grad_check: leaf '" + name + "' does not require grad");
    require(leaf.value().all_finite(), Errc::numeric,
            "grad_check: leaf '" + name + "' has non-finite values");
    leaf.zero_grad();
  }
  const Var root = f();
  require(root.value().size() == 1 && std::isfinite(root.item()), Errc::numeric,
          "grad_check: non-finite or non-scalar root");
  root.backward();

  GradCheckReport report;
  Rng sampler(opt.sample_seed);
  for (auto& [name, leaf] : leaves) {
    LeafCheck lc;
    lc.name = name;
    const Tensor analytic = leaf.has_grad() ? leaf.grad() : Tensor::zeros(leaf.shape());
    require(analytic.all_finite(), Errc::numeric,
            "grad_check: non-finite analytic gradient for '" + name + "'");

    std::vector<std::size_t> indices(leaf.value().size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (opt.max_elements_per_leaf > 0 && indices.size() > opt.max_elements_per_leaf) {
      for (std::size_t i = 0; i < opt.max_elements_per_leaf; ++i)
        std::swap(indices[i], indices[i + sampler.index(indices.size() - i)]);
      indices.resize(opt.max_elements_per_leaf);
      std::sort(indices.begin(), indices.end());
    }

    Tensor& values = leaf.mutable_value();
    for (std::size_t i : indices) {
      const double saved = values[i];
      values[i] = saved + opt.eps;
      const double fp = evaluate();
      values[i] = saved - opt.eps;
      const double fm = evaluate();
      values[i] = saved;

      double numeric = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[i];
      auto relative = [&](double n) {
        return std::abs(a - n) / std::max({std::abs(a), std::abs(n), opt.abs_floor});
      };
      double rel = relative(numeric);
      ++lc.checked;
      if (rel > opt.tol) {
        // Repeat at eps/2. For a smooth function the two central differences
        // differ by their O(eps^2) truncation terms, which Richardson
        // extrapolation removes; a kink inside the stencil breaks that model.
        values[i] = saved + 0.5 * opt.eps;
        const double fp2 = evaluate();
        values[i] = saved - 0.5 * opt.eps;
        const double fm2 = evaluate();
        values[i] = saved;
        const double numeric_half = (fp2 - fm2) / opt.eps;
        const double extrapolated = (4.0 * numeric_half - numeric) / 3.0;
        if (relative(extrapolated) <= opt.tol) {
          numeric = extrapolated;
          rel = relative(extrapolated);
        } else {
          // One-sided slope gaps (f(x+h) - 2 f(x) + f(x-h)) / h shrink
          // linearly with h on smooth functions but stay put when a kink lies
          // within both stencils, where the two central differences agree.
          const double f0 = evaluate();
          const double gap = (fp - 2.0 * f0 + fm) / opt.eps;
          const double gap_half = (fp2 - 2.0 * f0 + fm2) / (0.5 * opt.eps);
          const double err = std::abs(a - numeric);
          const bool outer_kink = std::abs(numeric_half - numeric) >= 0.5 * err;
          const bool inner_kink =
              std::abs(gap) >= err && std::abs(gap_half) > 0.75 * std::abs(gap);
          if (outer_kink || inner_kink) {
            ++lc.nonsmooth;
            continue;
          }
        }
      }
      if (rel > lc.max_rel_error) {
        lc.max_rel_error = rel;
        lc.worst_index = i;
        lc.worst_analytic = a;
        lc.worst_numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, lc.max_rel_error);
    report.checked += lc.checked;
    report.nonsmooth += lc.nonsmooth;
    report.leaves.push_back(std::move(lc));
  }
  report.passed =
      report.max_rel_error < opt.tol &&
      static_cast<double>(report.nonsmooth) <=
          opt.max_nonsmooth_fraction * static_cast<double>(report.checked);
  return report;
}

}  // namespace focusnet
