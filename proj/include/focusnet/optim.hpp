#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "focusnet/fnt1.hpp"
#include "focusnet/params.hpp"

namespace focusnet {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over every trainable entry of a ParamStore:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
class Adam {
 public:
  Adam(ParamStore& store, AdamOptions opt = {}) : opt_(opt) {
    for (const auto& e : store.entries()) {
      if (!e.trainable) continue;
      names_.push_back(e.name);
      params_.push_back(e.var);
      m_.emplace_back(e.var.shape());
      v_.emplace_back(e.var.shape());
    }
  }

  const AdamOptions& options() const noexcept { return opt_; }
  std::uint64_t steps() const noexcept { return t_; }

  /// One update with learning rate `lr`; parameters without a gradient are
  /// treated as having a zero gradient.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Var& p = params_[k];
      if (!p.has_grad()) continue;
      const Tensor& g = p.grad();
      require(g.shape() == m_[k].shape(), Errc::shape,
              "adam: gradient shape mismatch for '" + names_[k] + "'");
      double* theta = p.mutable_value().ptr();
      double* m = m_[k].ptr();
      double* v = v_[k].ptr();
      const double* gp = g.ptr();
      for (std::size_t i = 0, n = g.size(); i < n; ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gp[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gp[i] * gp[i];
        theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
      }
    }
  }

  void step() { step(opt_.lr); }

  /// Moments as "adam.m.<param>" / "adam.v.<param>" plus "adam.t".
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out;
    for (std::size_t k = 0; k < names_.size(); ++k) {
      out.push_back({"adam.m." + names_[k], m_[k]});
      out.push_back({"adam.v." + names_[k], v_[k]});
    }
    out.push_back({"adam.t", Tensor::scalar(static_cast<double>(t_))});
    return out;
  }

  void load_state(const std::vector<NamedTensor>& tensors) {
    for (std::size_t k = 0; k < names_.size(); ++k) {
      const Tensor& m = find_tensor(tensors, "adam.m." + names_[k]);
      const Tensor& v = find_tensor(tensors, "adam.v." + names_[k]);
      require(m.shape() == m_[k].shape() && v.shape() == v_[k].shape(), Errc::format,
              "adam state shape mismatch for '" + names_[k] + "'");
      m_[k] = m;
      v_[k] = v;
    }
    t_ = static_cast<std::uint64_t>(find_tensor(tensors, "adam.t").item());
  }

 private:
  AdamOptions opt_;
  std::vector<std::string> names_;
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace focusnet
