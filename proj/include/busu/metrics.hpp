#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "busu/tensor.hpp"

namespace busu {

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp, tn += o.tn, fp += o.fp, fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct CurvePoint {
  double threshold;
  double x;  // fpr (ROC) or recall (PR)
  double y;  // tpr (ROC) or precision (PR)
};

struct MetricsReport {
  ConfusionCounts counts;
  double accuracy = 0, sensitivity = 0, specificity = 0, precision = 0, recall = 0, f1 = 0;
  double auc = 0;
  // Ratios whose denominator was zero are reported as 0 and named here.
  std::vector<std::string> degenerate;
  std::vector<CurvePoint> roc_points;
  std::vector<CurvePoint> pr_points;

  bool is_degenerate(const std::string& metric) const {
    return std::find(degenerate.begin(), degenerate.end(), metric) != degenerate.end();
  }
};

inline constexpr double kDefaultThreshold = 0.5;

/// Pixel counts with prob >= threshold as positive. Pixels where `fov` is zero
/// are excluded.
template <class P, class L>
ConfusionCounts confusion(std::span<const P> prob, std::span<const L> truth, double threshold = kDefaultThreshold,
                          std::span<const L> fov = {}) {
  if (prob.size() != truth.size()) throw ShapeError("confusion: prediction and truth sizes differ");
  if (!fov.empty() && fov.size() != truth.size()) throw ShapeError("confusion: FOV size differs from truth");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("confusion: threshold must be in (0, 1)");
  ConfusionCounts c;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    if (!fov.empty() && !fov[i]) continue;
    const bool pos = double(prob[i]) >= threshold;
    const bool t = truth[i] != L(0);
    if (pos && t) ++c.tp;
    else if (pos) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

template <Real T>
ConfusionCounts confusion(const Tensor<T>& prob, const Tensor<T>& truth, double threshold = kDefaultThreshold,
                          const Tensor<T>* fov = nullptr) {
  if (prob.shape() != truth.shape()) throw ShapeError("confusion: shape mismatch " + to_string(prob.shape()) + " vs " + to_string(truth.shape()));
  if (fov && fov->shape() != truth.shape()) throw ShapeError("confusion: FOV shape mismatch");
  return confusion<T, T>(prob.data(), truth.data(), threshold, fov ? fov->data() : std::span<const T>{});
}

namespace detail {

inline double ratio(std::uint64_t num, std::uint64_t den, const char* name, std::vector<std::string>& flags) {
  if (den == 0) {
    flags.emplace_back(name);
    return 0.0;
  }
  return double(num) / double(den);
}

}  // namespace detail

/// accuracy = (TP+TN)/(TP+TN+FP+FN), sensitivity = recall = TP/(TP+FN),
/// specificity = TN/(TN+FP), precision = TP/(TP+FP),
/// F1 = 2 * precision * recall / (precision + recall).
inline MetricsReport derive_metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw UsageError("derive_metrics: no evaluated pixels");
  MetricsReport r;
  r.counts = c;
  r.accuracy = double(c.tp + c.tn) / double(c.total());
  r.sensitivity = detail::ratio(c.tp, c.tp + c.fn, "sensitivity", r.degenerate);
  r.recall = r.sensitivity;
  r.specificity = detail::ratio(c.tn, c.tn + c.fp, "specificity", r.degenerate);
  r.precision = detail::ratio(c.tp, c.tp + c.fp, "precision", r.degenerate);
  if (r.precision + r.recall > 0.0) {
    r.f1 = 2.0 * (r.precision * r.recall) / (r.precision + r.recall);
  } else {
    r.f1 = 0.0;
    r.degenerate.emplace_back("f1");
  }
  return r;
}

namespace detail {

// Indices sorted by descending score; groups of equal scores are processed
// together so ties move the curve diagonally.
template <class S>
std::vector<std::size_t> descending_order(std::span<const S> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

template <class L>
std::pair<std::uint64_t, std::uint64_t> class_counts(std::span<const L> truth) {
  std::uint64_t pos = 0;
  for (auto t : truth) pos += t != L(0);
  return {pos, truth.size() - pos};
}

}  // namespace detail

struct RocResult {
  std::vector<CurvePoint> points;
  double auc = 0.0;
};

/// ROC swept over every distinct score (score >= t is positive), starting at
/// (0,0) with threshold +inf and ending at (1,1). AUC by trapezoids over
/// (fpr, tpr), which equals the Mann-Whitney statistic with ties counted 1/2.
template <class S, class L>
RocResult roc_auc(std::span<const S> scores, std::span<const L> truth) {
  if (scores.size() != truth.size()) throw ShapeError("roc_auc: score and label sizes differ");
  const auto [pos, neg] = detail::class_counts(truth);
  if (pos == 0 || neg == 0) throw UsageError("roc_auc: truth must contain both classes");
  const auto idx = detail::descending_order(scores);
  RocResult r;
  r.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::uint64_t tp = 0, fp = 0;
  double area2 = 0.0;  // twice the area, in units of (1/neg)(1/pos)
  for (std::size_t i = 0; i < idx.size();) {
    const S s = scores[idx[i]];
    const std::uint64_t tp0 = tp, fp0 = fp;
    for (; i < idx.size() && scores[idx[i]] == s; ++i) (truth[idx[i]] != L(0) ? tp : fp) += 1;
    area2 += double(fp - fp0) * double(tp + tp0);
    r.points.push_back({double(s), double(fp) / double(neg), double(tp) / double(pos)});
  }
  r.auc = area2 / (2.0 * double(pos) * double(neg));
  return r;
}

/// Precision and recall at every distinct score threshold, in increasing
/// threshold order (recall non-increasing along the list).
template <class S, class L>
std::vector<CurvePoint> pr_curve(std::span<const S> scores, std::span<const L> truth) {
  if (scores.size() != truth.size()) throw ShapeError("pr_curve: score and label sizes differ");
  const auto [pos, neg] = detail::class_counts(truth);
  if (pos == 0) throw UsageError("pr_curve: truth has no positives");
  const auto idx = detail::descending_order(scores);
  std::vector<CurvePoint> pts;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const S s = scores[idx[i]];
    for (; i < idx.size() && scores[idx[i]] == s; ++i) (truth[idx[i]] != L(0) ? tp : fp) += 1;
    pts.push_back({double(s), double(tp) / double(pos), double(tp) / double(tp + fp)});
  }
  std::reverse(pts.begin(), pts.end());
  return pts;
}

/// Full report: confusion metrics at `threshold`, ROC/AUC and PR curve.
/// `fov` (optional) masks pixels out of every metric.
template <class S, class L>
MetricsReport evaluate_scores(std::span<const S> scores, std::span<const L> truth, double threshold = kDefaultThreshold,
                              std::span<const L> fov = {}) {
  std::vector<S> s;
  std::vector<L> t;
  if (!fov.empty()) {
    if (fov.size() != truth.size()) throw ShapeError("evaluate: FOV size differs from truth");
    for (std::size_t i = 0; i < truth.size(); ++i)
      if (fov[i]) s.push_back(scores[i]), t.push_back(truth[i]);
    scores = s;
    truth = t;
  }
  MetricsReport r = derive_metrics(confusion<S, L>(scores, truth, threshold));
  const auto [pos, neg] = detail::class_counts(truth);
  if (pos > 0 && neg > 0) {
    auto roc = roc_auc<S, L>(scores, truth);
    r.auc = roc.auc;
    r.roc_points = std::move(roc.points);
  } else {
    r.degenerate.emplace_back("auc");
  }
  if (pos > 0) r.pr_points = pr_curve<S, L>(scores, truth);
  return r;
}

// ---------------------------------------------------------------------------
// Output.

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Table row in the column order method, accuracy, sensitivity, specificity,
/// AUC, F1 with 4 decimals.
inline std::string format_report(const std::string& method, const MetricsReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-16s %.4f %.4f %.4f %.4f %.4f", method.c_str(), r.accuracy, r.sensitivity,
                r.specificity, r.auc, r.f1);
  return buf;
}

inline std::string format_report_header() {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-16s %-6s %-6s %-6s %-6s %-6s", "Method", "Acc", "Sens", "Spec", "AUC", "F1");
  return buf;
}

inline void write_roc_csv(std::ostream& os, const std::vector<CurvePoint>& pts) {
  os << "threshold,fpr,tpr\n";
  char buf[96];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", p.threshold, p.x, p.y);
    os << buf;
  }
}

inline void write_pr_csv(std::ostream& os, const std::vector<CurvePoint>& pts) {
  os << "threshold,recall,precision\n";
  char buf[96];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", p.threshold, p.x, p.y);
    os << buf;
  }
}

inline void write_report_csv(std::ostream& os, const std::string& method, const MetricsReport& r) {
  os << "method,accuracy,sensitivity,specificity,precision,recall,f1,auc,tp,tn,fp,fn\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%llu,%llu,%llu,%llu\n", method.c_str(),
                r.accuracy, r.sensitivity, r.specificity, r.precision, r.recall, r.f1, r.auc,
                (unsigned long long)r.counts.tp, (unsigned long long)r.counts.tn, (unsigned long long)r.counts.fp,
                (unsigned long long)r.counts.fn);
  os << buf;
}

}  // namespace busu
