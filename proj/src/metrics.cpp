#include "dsbel/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dsbel/common.hpp"

namespace dsbel {

namespace {

void check_binary(std::span<const int> labels, const char* who) {
  for (int v : labels)
    if (v != 0 && v != 1) throw ConfigError(std::string(who) + ": labels must be 0 or 1");
}

void check_scored(std::span<const double> scores, std::span<const int> labels, const char* who) {
  if (scores.size() != labels.size()) throw ConfigError(std::string(who) + ": length mismatch");
  check_binary(labels, who);
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size()))
    throw DataError(std::string(who) + ": AUC undefined for single-class labels");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError(std::string(who) + ": non-finite score");
}

// Indices ordered by descending score.
std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ConfigError("confusion: length mismatch");
  check_binary(predicted, "confusion");
  check_binary(truth, "confusion");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 1) (predicted[i] == 1 ? cm.tp : cm.fn)++;
    else (predicted[i] == 1 ? cm.fp : cm.tn)++;
  }
  return cm;
}

MetricsRecord compute_metrics(const ConfusionMatrix& cm) {
  if (cm.tp < 0 || cm.tn < 0 || cm.fp < 0 || cm.fn < 0) throw ConfigError("compute_metrics: negative count");
  if (cm.total() == 0) throw DataError("compute_metrics: empty confusion matrix");
  const double tp = static_cast<double>(cm.tp), tn = static_cast<double>(cm.tn);
  const double fp = static_cast<double>(cm.fp), fn = static_cast<double>(cm.fn);
  MetricsRecord m;
  m.accuracy = (tp + tn) / (tp + tn + fp + fn) * 100.0;
  const double precision = (cm.tp + cm.fp) == 0 ? 0.0 : tp / (tp + fp);
  const double recall = (cm.tp + cm.fn) == 0 ? 0.0 : tp / (tp + fn);
  m.precision = precision * 100.0;
  m.recall = recall * 100.0;
  m.f1 = (precision + recall) == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall) * 100.0;
  const double d1 = tp + fp, d2 = tp + fn, d3 = tn + fp, d4 = tn + fn;
  if (d1 == 0.0 || d2 == 0.0 || d3 == 0.0 || d4 == 0.0) {
    m.mcc = 0.0;
  } else {
    m.mcc = (tp * tn - fp * fn) / std::sqrt(d1 * d2 * d3 * d4);
  }
  return m;
}

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels, "roc_auc");
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double neg = static_cast<double>(labels.size()) - pos;
  const auto order = descending(scores);
  RocCurve roc;
  roc.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double tp = 0.0, fp = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) {
      (labels[order[i]] == 1 ? tp : fp) += 1.0;
      ++i;
    }
    const CurvePoint prev = roc.points.back();
    const CurvePoint next{fp / neg, tp / pos, thr};
    roc.auc += (next.x - prev.x) * (next.y + prev.y) * 0.5;
    roc.points.push_back(next);
  }
  return roc;
}

PrCurve pr_curve(std::span<const double> scores, std::span<const int> labels) {
  check_scored(scores, labels, "pr_curve");
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const auto order = descending(scores);
  PrCurve pr;
  double tp = 0.0, fp = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) {
      (labels[order[i]] == 1 ? tp : fp) += 1.0;
      ++i;
    }
    pr.points.push_back({tp / pos, tp / (tp + fp), thr});
  }
  return pr;
}

}  // namespace dsbel
