#pragma once

#include <cmath>
#include <set>
#include <string>

#include <json.hpp>

#include "focusnet/ops.hpp"

namespace focusnet {

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] inside logarithms.
inline constexpr double kProbClamp = 1e-7;

enum class LossWrapper { all, none };

struct LossConfig {
  double k = 0.5;           // weight of balanced cross entropy in the hybrid
  double omega_bace = 0.7;  // positive-class weight of balanced cross entropy
  double alpha = 0.3;       // Tversky false-positive weight
  double beta = 0.7;        // Tversky false-negative weight
  double gamma = 0.1;       // adaptive-log switch point
  double omega_all = 10.0;  // adaptive-log scale
  double epsilon = 0.5;     // adaptive-log curvature
  LossWrapper wrapper = LossWrapper::all;

  /// Continuity constant of the adaptive logarithmic wrapper.
  double c() const { return gamma - omega_all * std::log1p(gamma / epsilon); }

  void validate() const {
    require(k >= 0.0 && k <= 1.0, Errc::config, "loss k must lie in [0, 1]");
    require(omega_bace > 0.0 && omega_bace < 1.0, Errc::config,
            "loss omega_bace must lie in (0, 1)");
    require(alpha > 0.0 && beta > 0.0, Errc::config, "Tversky alpha and beta must be positive");
    require(gamma > 0.0 && omega_all > 0.0 && epsilon > 0.0, Errc::config,
            "adaptive-log gamma, omega and epsilon must be positive");
  }

  nlohmann::json to_json() const {
    return {{"k", k},         {"omega_bace", omega_bace}, {"alpha", alpha},
            {"beta", beta},   {"gamma", gamma},           {"omega_all", omega_all},
            {"epsilon", epsilon},
            {"wrapper", wrapper == LossWrapper::all ? "all" : "none"}};
  }

  static LossConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"k",     "omega_bace", "alpha",   "beta",
                                             "gamma", "omega_all",  "epsilon", "wrapper"};
    require(j.is_object(), Errc::config, "loss config must be a JSON object");
    for (const auto& [key, _] : j.items())
      require(known.contains(key), Errc::config, "unknown loss config key '" + key + "'");
    LossConfig c;
    try {
      c.k = j.value("k", c.k);
      c.omega_bace = j.value("omega_bace", c.omega_bace);
      c.alpha = j.value("alpha", c.alpha);
      c.beta = j.value("beta", c.beta);
      c.gamma = j.value("gamma", c.gamma);
      c.omega_all = j.value("omega_all", c.omega_all);
      c.epsilon = j.value("epsilon", c.epsilon);
      const std::string w = j.value("wrapper", std::string("all"));
      require(w == "all" || w == "none", Errc::config, "loss wrapper must be all or none");
      c.wrapper = w == "all" ? LossWrapper::all : LossWrapper::none;
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::config, std::string("loss config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

namespace detail {

inline void require_mask(const Var& p_hat, const Tensor& p, const char* op) {
  require(p_hat.shape() == p.shape(), Errc::shape,
          std::string(op) + ": prediction " + shape_str(p_hat.shape()) +
              " and mask " + shape_str(p.shape()) + " differ");
}

inline Var one_minus(const Var& x) { return add_scalar(scale(x, -1.0), 1.0); }

inline Tensor one_minus(const Tensor& t) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = 1.0 - t[i];
  return out;
}

}  // namespace detail

/// Balanced cross entropy, negated so that it is a non-negative loss:
///   -mean( Omega p log(p_hat) + (1 - Omega)(1 - p) log(1 - p_hat) ).
inline Var bace(const Var& p_hat, const Tensor& p, double omega) {
  detail::require_mask(p_hat, p, "bace");
  Tensor w_pos(p.shape()), w_neg(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    w_pos[i] = omega * p[i];
    w_neg[i] = (1.0 - omega) * (1.0 - p[i]);
  }
  const Var pos = mul(Var(std::move(w_pos)), log_clamped(p_hat, kProbClamp, 1.0 - kProbClamp));
  const Var neg = mul(Var(std::move(w_neg)),
                      log_clamped(detail::one_minus(p_hat), kProbClamp, 1.0 - kProbClamp));
  return scale(mean(add(pos, neg)), -1.0);
}

/// Soft Tversky index TP / (TP + alpha FP + beta FN) with TP = sum p p_hat,
/// FP = sum (1-p) p_hat, FN = sum p (1-p_hat), summed over the whole batch.
/// Defined as 1 when the denominator vanishes.
inline Var tversky_index(const Var& p_hat, const Tensor& p, double alpha, double beta) {
  detail::require_mask(p_hat, p, "tversky_index");
  const Var gt(p);
  const Var tp = sum(mul(gt, p_hat));
  const Var fp = sum(mul(Var(detail::one_minus(p)), p_hat));
  const Var fn = sum(mul(gt, detail::one_minus(p_hat)));
  const Var denom = add(add(tp, scale(fp, alpha)), scale(fn, beta));
  if (denom.item() == 0.0) return Var(Tensor::scalar(1.0));
  return div(tp, denom);
}

/// Single foreground class: TL = 1 - TI.
inline Var tversky_loss(const Var& p_hat, const Tensor& p, double alpha, double beta) {
  return detail::one_minus(tversky_index(p_hat, p, alpha, beta));
}

inline Var hybrid_loss(const Var& p_hat, const Tensor& p, const LossConfig& cfg) {
  return add(scale(bace(p_hat, p, cfg.omega_bace), cfg.k),
             scale(tversky_loss(p_hat, p, cfg.alpha, cfg.beta), 1.0 - cfg.k));
}

/// Adaptive logarithmic wrapper of a scalar loss value.
inline double all_wrap_value(double hl, const LossConfig& cfg) {
  const double h = std::abs(hl);
  if (h < cfg.gamma) return cfg.omega_all * std::log1p(h / cfg.epsilon);
  return h - cfg.c();
}

/// Derivative with respect to hl; at |hl| = gamma the inner (logarithmic)
/// branch derivative is used, and 0 at hl = 0.
inline double all_wrap_derivative(double hl, const LossConfig& cfg) {
  const double h = std::abs(hl);
  const double sign = hl > 0.0 ? 1.0 : (hl < 0.0 ? -1.0 : 0.0);
  if (h <= cfg.gamma) return sign * cfg.omega_all / (cfg.epsilon + h);
  return sign;
}

inline Var all_wrap(const Var& hl, const LossConfig& cfg) {
  require(hl.value().size() == 1, Errc::shape, "all_wrap: expects a scalar");
  require(std::isfinite(hl.item()), Errc::numeric, "all_wrap: non-finite input");
  const double v = all_wrap_value(hl.item(), cfg);
  return record(Tensor(hl.shape(), v), {hl}, "all_wrap", [cfg](Node& self) {
    if (Tensor* d = input_grad(self, 0))
      (*d)[0] += self.grad[0] * all_wrap_derivative(self.inputs[0]->value[0], cfg);
  });
}

/// The training objective: ALL-HL, or plain HL when the wrapper is off.
inline Var segmentation_loss(const Var& p_hat, const Tensor& p, const LossConfig& cfg) {
  const Var hl = hybrid_loss(p_hat, p, cfg);
  return cfg.wrapper == LossWrapper::all ? all_wrap(hl, cfg) : hl;
}

}  // namespace focusnet
