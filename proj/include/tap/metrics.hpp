#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace tap::model {

struct Confusion {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;
};

struct Metrics {
  double threshold = 0.5;
  Confusion confusion;
  // Percentages; empty when the denominator is zero.
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> accuracy;
  // Empty when only one class is present.
  std::optional<double> auc;
};

// Area under the ROC curve by the trapezoid rule over every distinct score
// threshold; tied scores move both rates at once.
std::optional<double> roc_auc(std::span<const double> scores, const std::vector<bool>& labels);

// A sample is predicted positive when score >= threshold.
Metrics compute_metrics(std::span<const double> scores, const std::vector<bool>& labels, double threshold = 0.5);

}  // namespace tap::model
