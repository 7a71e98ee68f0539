#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rtdforge {

struct MetricValue {
  std::string name;
  double value = 0.0;
  bool higher_is_better = true;
};

/// A correlation and whether its input was degenerate (a zero-variance side),
/// in which case value is 0.
struct Correlation {
  double value = 0.0;
  bool degenerate = false;
};

double accuracy(std::span<const int> predictions, std::span<const int> labels);

/// Matthews correlation over {0, 1} labels; 0 (degenerate) when any
/// confusion-matrix margin is empty.
Correlation matthews_corr(std::span<const int> predictions, std::span<const int> labels);

/// Positive class is 1. No predicted and no actual positives gives 1.0.
double f1_binary(std::span<const int> predictions, std::span<const int> labels);

Correlation pearson_corr(std::span<const double> a, std::span<const double> b);

/// Pearson correlation of average ranks.
Correlation spearman_corr(std::span<const double> a, std::span<const double> b);

/// 1-based ranks with ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Probability that a random positive outscores a random negative, ties
/// counted half. Throws ValueError "degenerate AUC" on single-class labels.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Sample mean and sample (n - 1) standard deviation; stddev is 0 for n < 2.
struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
};
MeanStd mean_std(std::span<const double> values);

}  // namespace rtdforge
