#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "rtdforge/error.hpp"
#include "rtdforge/metrics.hpp"

namespace rtdforge {
namespace {

// Independent formulations used as oracles.
double brute_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
    sab += a[i] * b[i];
    saa += a[i] * a[i];
    sbb += b[i] * b[i];
  }
  return (n * sab - sa * sb) / std::sqrt((n * saa - sa * sa) * (n * sbb - sb * sb));
}

std::vector<double> brute_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double x : v) {
      less += x < v[i] ? 1 : 0;
      equal += x == v[i] ? 1 : 0;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
  }
  return wins / pairs;
}

std::vector<double> as_double(const std::vector<int>& v) { return {v.begin(), v.end()}; }

TEST(Accuracy, CountsMatches) {
  const std::vector<int> p = {1, 0, 2, 2};
  const std::vector<int> y = {1, 1, 2, 0};
  EXPECT_DOUBLE_EQ(accuracy(p, y), 0.5);
  EXPECT_THROW(accuracy(p, std::vector<int>{1}), ValueError);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), ValueError);
}

TEST(Matthews, ConfusionOracle) {
  // TP 3, TN 4, FP 1, FN 2.
  const std::vector<int> y = {1, 1, 1, 0, 0, 0, 0, 0, 1, 1};
  const std::vector<int> p = {1, 1, 1, 0, 0, 0, 0, 1, 0, 0};
  const Correlation c = matthews_corr(p, y);
  EXPECT_NEAR(c.value, 0.408248290463863, 1e-12);
  EXPECT_FALSE(c.degenerate);
}

TEST(Matthews, DegenerateMarginsGiveZero) {
  const std::vector<int> y = {1, 0, 1, 0};
  const Correlation c = matthews_corr(std::vector<int>{1, 1, 1, 1}, y);
  EXPECT_EQ(c.value, 0.0);
  EXPECT_TRUE(c.degenerate);
  EXPECT_THROW(matthews_corr(std::vector<int>{2, 0, 1, 0}, y), ValueError);
}

TEST(Matthews, PerfectAndInverted) {
  const std::vector<int> y = {1, 0, 1, 0, 0};
  const std::vector<int> inv = {0, 1, 0, 1, 1};
  EXPECT_DOUBLE_EQ(matthews_corr(y, y).value, 1.0);
  EXPECT_DOUBLE_EQ(matthews_corr(inv, y).value, -1.0);
}

TEST(F1, Oracle) {
  EXPECT_NEAR(f1_binary(std::vector<int>{1, 1, 0}, std::vector<int>{1, 0, 0}), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(f1_binary(std::vector<int>{0, 0}, std::vector<int>{0, 0}), 1.0);
  EXPECT_EQ(f1_binary(std::vector<int>{0, 0}, std::vector<int>{1, 0}), 0.0);
}

TEST(Spearman, TiedOracle) {
  const std::vector<double> a = {1, 2, 2, 3};
  const std::vector<double> b = {1, 3, 2, 4};
  EXPECT_EQ(average_ranks(a), (std::vector<double>{1, 2.5, 2.5, 4}));
  const Correlation c = spearman_corr(a, b);
  EXPECT_NEAR(c.value, 0.9486832980505139, 1e-12);
  EXPECT_FALSE(c.degenerate);
}

TEST(Spearman, InvariantUnderMonotoneTransform) {
  const std::vector<double> a = {0.3, -1.0, 2.5, 0.1, 7.0};
  const std::vector<double> b = {1.0, 0.2, 0.4, 3.0, -2.0};
  std::vector<double> ea;
  for (double x : a) ea.push_back(std::exp(x));
  EXPECT_NEAR(spearman_corr(a, b).value, spearman_corr(ea, b).value, 1e-15);
}

TEST(Pearson, DegenerateAndBounds) {
  const Correlation c = pearson_corr(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3});
  EXPECT_EQ(c.value, 0.0);
  EXPECT_TRUE(c.degenerate);
  EXPECT_TRUE(spearman_corr(std::vector<double>{4, 4}, std::vector<double>{1, 2}).degenerate);
  EXPECT_DOUBLE_EQ(pearson_corr(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}).value, 1.0);
  EXPECT_THROW(pearson_corr(std::vector<double>{1}, std::vector<double>{1}), ValueError);
}

TEST(RocAuc, OracleAndDegenerate) {
  const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
  EXPECT_DOUBLE_EQ(roc_auc(s, std::vector<int>{0, 0, 1, 1}), 0.75);
  EXPECT_DOUBLE_EQ(roc_auc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
  try {
    roc_auc(s, std::vector<int>{1, 1, 1, 1});
    FAIL() << "single-class AUC accepted";
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate AUC"), std::string::npos);
  }
}

TEST(MeanStd, SampleStatistics) {
  const MeanStd m = mean_std(std::vector<double>{60, 62, 64});
  EXPECT_DOUBLE_EQ(m.mean, 62.0);
  EXPECT_DOUBLE_EQ(m.stddev, 2.0);
  const MeanStd one = mean_std(std::vector<double>{5});
  EXPECT_EQ(one.mean, 5.0);
  EXPECT_EQ(one.stddev, 0.0);
  EXPECT_EQ(mean_std(std::vector<double>{7, 7, 7}).stddev, 0.0);
}

TEST(Property, RandomInputsMatchBruteForce) {
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<int> len(3, 40);
  std::uniform_int_distribution<int> coarse(0, 5);  // forces ties
  std::normal_distribution<double> normal;
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = static_cast<std::size_t>(len(gen));
    std::vector<double> a(n), b(n);
    std::vector<int> p(n), y(n);
    const bool tied = trial % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = tied ? coarse(gen) : normal(gen);
      b[i] = tied ? coarse(gen) : normal(gen);
      p[i] = coin(gen) ? 1 : 0;
      y[i] = coin(gen) ? 1 : 0;
    }
    const Correlation pc = pearson_corr(a, b);
    const Correlation sc = spearman_corr(a, b);
    if (!pc.degenerate) {
      EXPECT_NEAR(pc.value, brute_pearson(a, b), 1e-10) << trial;
    }
    if (!sc.degenerate) {
      EXPECT_NEAR(sc.value, brute_pearson(brute_ranks(a), brute_ranks(b)), 1e-10) << trial;
    }
    EXPECT_EQ(average_ranks(a), brute_ranks(a)) << trial;
    const Correlation mc = matthews_corr(p, y);
    if (!mc.degenerate) {
      // MCC equals the Pearson correlation of the two indicator vectors.
      EXPECT_NEAR(mc.value, brute_pearson(as_double(p), as_double(y)), 1e-10) << trial;
    }
    const bool both_classes = std::count(y.begin(), y.end(), 1) % static_cast<long>(n) != 0;
    if (both_classes) {
      EXPECT_NEAR(roc_auc(a, y), brute_auc(a, y), 1e-10) << trial;
    }
    EXPECT_GE(f1_binary(p, y), 0.0);
    EXPECT_LE(f1_binary(p, y), 1.0);
  }
}

}  // namespace
}  // namespace rtdforge
