#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "focusnet/tensor.hpp"

namespace focusnet {

/// TP/FP/FN/TN tallies. Hard counts are integers stored exactly in doubles;
/// soft counts use the same type.
struct ConfusionCounts {
  double tp = 0, fp = 0, fn = 0, tn = 0;

  double total() const { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }

  nlohmann::json to_json() const {
    return {{"tp", tp}, {"fp", fp}, {"fn", fn}, {"tn", tn}};
  }

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// A prediction counts as positive when strictly above the threshold.
inline ConfusionCounts confusion(std::span<const double> truth, std::span<const double> p_hat,
                                 double threshold = 0.5) {
  require(truth.size() == p_hat.size(), Errc::shape, "confusion: size mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool gt = truth[i] > 0.5;
    const bool pr = p_hat[i] > threshold;
    if (gt && pr) c.tp += 1;
    else if (!gt && pr) c.fp += 1;
    else if (gt) c.fn += 1;
    else c.tn += 1;
  }
  return c;
}

inline ConfusionCounts confusion(const Tensor& truth, const Tensor& p_hat, double threshold = 0.5) {
  require(truth.shape() == p_hat.shape(), Errc::shape, "confusion: shape mismatch");
  return confusion(truth.data(), p_hat.data(), threshold);
}

/// Hard-count Tversky index; 1 when both masks are empty.
inline double tversky_index(const ConfusionCounts& c, double alpha, double beta) {
  const double denom = c.tp + alpha * c.fp + beta * c.fn;
  return denom == 0.0 ? 1.0 : c.tp / denom;
}

/// A ratio that may be undefined (zero denominator); undefined values read 0.
struct Ratio {
  double value = 0.0;
  bool defined = false;

  static Ratio of(double num, double den) {
    if (den == 0.0) return {0.0, false};
    return {num / den, true};
  }

  nlohmann::json to_json() const {
    return defined ? nlohmann::json(value) : nlohmann::json(nullptr);
  }
};

struct Metrics {
  Ratio precision, recall, accuracy, dice, jaccard, f1;

  static Metrics from_counts(const ConfusionCounts& c) {
    Metrics m;
    m.precision = Ratio::of(c.tp, c.tp + c.fp);
    m.recall = Ratio::of(c.tp, c.tp + c.fn);
    m.accuracy = Ratio::of(c.tp + c.tn, c.total());
    m.dice = Ratio::of(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn);
    m.jaccard = Ratio::of(c.tp, c.tp + c.fp + c.fn);
    if (m.precision.defined && m.recall.defined)
      m.f1 = Ratio::of(2.0 * m.precision.value * m.recall.value,
                       m.precision.value + m.recall.value);
    return m;
  }

  nlohmann::json to_json() const {
    return {{"precision", precision.to_json()}, {"recall", recall.to_json()},
            {"accuracy", accuracy.to_json()},   {"dice", dice.to_json()},
            {"jaccard", jaccard.to_json()},     {"f1", f1.to_json()}};
  }
};

inline Metrics metrics(const Tensor& truth, const Tensor& p_hat, double threshold = 0.5) {
  return Metrics::from_counts(confusion(truth, p_hat, threshold));
}

// ---------------------------------------------------------------------------
// ROC

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (FPR, TPR), from (0,0) to (1,1)
  double auc = 0.0;
};

/// AUC as the fraction of positive-negative pairs ordered correctly, ties
/// counting one half; computed over tie groups in O(n log n).
inline RocCurve roc(std::span<const double> scores, std::span<const double> labels) {
  require(scores.size() == labels.size(), Errc::shape, "roc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double pos = 0, neg = 0;
  for (double l : labels) (l > 0.5 ? pos : neg) += 1;
  require(pos > 0 && neg > 0, Errc::argument,
          "roc: needs at least one positive and one negative label");

  RocCurve curve;
  curve.points.emplace_back(0.0, 0.0);
  double tp = 0, fp = 0, correct = 0;
  for (std::size_t i = 0; i < order.size();) {
    double gp = 0, gn = 0;
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] > 0.5 ? gp : gn) += 1;
      ++j;
    }
    // Positives in this group outrank every negative not yet seen.
    correct += gp * (neg - fp - gn) + 0.5 * gp * gn;
    tp += gp;
    fp += gn;
    curve.points.emplace_back(fp / neg, tp / pos);
    i = j;
  }
  curve.auc = correct / (pos * neg);
  return curve;
}

inline double roc_auc(std::span<const double> scores, std::span<const double> labels) {
  return roc(scores, labels).auc;
}

}  // namespace focusnet
