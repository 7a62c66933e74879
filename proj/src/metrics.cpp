#include "tap/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

#include "tap/common.hpp"

namespace tap::model {
namespace {

void check_sizes(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw Error("size_mismatch", "scores and labels differ in length");
}

}  // namespace

std::optional<double> roc_auc(std::span<const double> scores, const std::vector<bool>& labels) {
  check_sizes(scores, labels);
  const std::int64_t positives = std::count(labels.begin(), labels.end(), true);
  const auto negatives = static_cast<std::int64_t>(labels.size()) - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Sweep thresholds from high to low; each tie group is one ROC point.
  double area = 0.0;
  std::int64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::int64_t dtp = 0, dfp = 0;
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? dtp : dfp)++;
      ++j;
    }
    // Trapezoid in (fp, tp) count space.
    area += static_cast<double>(dfp) * (static_cast<double>(tp) + 0.5 * static_cast<double>(dtp));
    tp += dtp;
    fp += dfp;
    i = j;
  }
  return area / (static_cast<double>(positives) * static_cast<double>(negatives));
}

Metrics compute_metrics(std::span<const double> scores, const std::vector<bool>& labels, double threshold) {
  check_sizes(scores, labels);
  Metrics m;
  m.threshold = threshold;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (predicted && labels[i]) ++m.confusion.tp;
    else if (predicted) ++m.confusion.fp;
    else if (labels[i]) ++m.confusion.fn;
    else ++m.confusion.tn;
  }
  const auto& c = m.confusion;
  if (c.tp + c.fp > 0) m.precision = 100.0 * c.tp / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) m.recall = 100.0 * c.tp / static_cast<double>(c.tp + c.fn);
  if (!scores.empty()) m.accuracy = 100.0 * (c.tp + c.tn) / static_cast<double>(scores.size());
  m.auc = roc_auc(scores, labels);
  return m;
}

}  // namespace tap::model
