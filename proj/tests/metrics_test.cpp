#include <gtest/gtest.h>

#include <algorithm>

#include "tap/common.hpp"
#include "tap/metrics.hpp"

namespace tap::model {
namespace {

struct Fixture {
  std::vector<double> scores;
  std::vector<bool> labels;
  std::optional<double> precision;
  std::optional<double> recall;
  double auc;
};

TEST(Metrics, HandFixtures) {
  const std::vector<Fixture> cases = {
      {{0.9, 0.8, 0.3, 0.1}, {true, true, false, false}, 100.0, 100.0, 1.0},
      {{0.9, 0.6, 0.4, 0.2}, {true, false, true, false}, 50.0, 50.0, 0.75},
      {{0.5, 0.5, 0.5, 0.5}, {true, false, true, false}, 50.0, 100.0, 0.5},
      {{0.4, 0.3, 0.2, 0.1}, {true, false, true, false}, std::nullopt, 0.0, 0.75},
      {{0.1, 0.2, 0.8, 0.9}, {true, true, false, false}, 0.0, 0.0, 0.0},
  };
  for (const auto& c : cases) {
    const Metrics m = compute_metrics(c.scores, c.labels);
    EXPECT_EQ(m.precision, c.precision);
    EXPECT_EQ(m.recall, c.recall);
    ASSERT_TRUE(m.auc.has_value());
    EXPECT_DOUBLE_EQ(*m.auc, c.auc);
  }
}

TEST(Metrics, ConfusionCounts) {
  const Metrics m = compute_metrics(std::vector<double>{0.9, 0.6, 0.4, 0.2}, {true, false, true, false});
  EXPECT_EQ(m.confusion.tp, 1);
  EXPECT_EQ(m.confusion.fp, 1);
  EXPECT_EQ(m.confusion.tn, 1);
  EXPECT_EQ(m.confusion.fn, 1);
  EXPECT_DOUBLE_EQ(*m.accuracy, 50.0);
}

TEST(Metrics, SingleClassHasNoAuc) {
  EXPECT_FALSE(roc_auc(std::vector<double>{0.1, 0.7}, {true, true}).has_value());
  const Metrics m = compute_metrics(std::vector<double>{0.1, 0.7}, {false, false});
  EXPECT_FALSE(m.auc.has_value());
  EXPECT_FALSE(m.recall.has_value());
}

// Oracle: fraction of (positive, negative) pairs ranked correctly, ties half.
double pair_auc(const std::vector<double>& s, const std::vector<bool>& y) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      pairs += 1.0;
      good += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return good / pairs;
}

TEST(Metrics, AucMatchesPairCountingWithTies) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(60);
    std::vector<bool> y(60);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = rng.uniform_int(0, 9) / 10.0;
      y[i] = rng.bernoulli(0.4);
    }
    y[0] = true;
    y[1] = false;
    EXPECT_NEAR(*roc_auc(s, y), pair_auc(s, y), 1e-12);
  }
}

TEST(Metrics, RandomScoresGiveHalf) {
  Rng rng(11);
  std::vector<double> s(10000);
  std::vector<bool> y(10000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform();
    y[i] = rng.bernoulli(0.5);
  }
  EXPECT_NEAR(*roc_auc(s, y), 0.5, 0.02);
}

}  // namespace
}  // namespace tap::model
