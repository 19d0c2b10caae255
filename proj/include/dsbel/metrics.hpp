#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dsbel {

// Malware (label 1) is the positive class.
struct ConfusionMatrix {
  std::int64_t tp = 0;
  std::int64_t tn = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + tn + fp + fn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth);

struct MetricsRecord {
  double accuracy = 0.0;   // percent
  double precision = 0.0;  // percent
  double recall = 0.0;     // percent
  double f1 = 0.0;         // percent
  double mcc = 0.0;        // [-1, 1]
  double auc = 0.0;        // [0, 1], filled separately
};

// Precision, recall and F1 are 0 when their denominators are 0; MCC is 0
// when any factor of its denominator is 0.
MetricsRecord compute_metrics(const ConfusionMatrix& cm);

struct CurvePoint {
  double x = 0.0;
  double y = 0.0;
  double threshold = 0.0;
};

// ROC: x = FPR, y = TPR, from (0,0) to (1,1). Scores equal to a threshold are
// classified positive; tied scores move together.
struct RocCurve {
  std::vector<CurvePoint> points;
  double auc = 0.0;
};

// PR: x = recall, y = precision, one point per distinct threshold.
struct PrCurve {
  std::vector<CurvePoint> points;
};

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels);
PrCurve pr_curve(std::span<const double> scores, std::span<const int> labels);

}  // namespace dsbel
