#include "rtdforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rtdforge/error.hpp"

namespace rtdforge {

namespace {

template <typename A, typename B>
void check_lengths(const char* metric, std::span<A> a, std::span<B> b, std::size_t min_len) {
  if (a.size() != b.size()) {
    throw ValueError(std::string(metric) + ": length mismatch (" + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()) + ")");
  }
  if (a.size() < min_len) {
    throw ValueError(std::string(metric) + ": needs at least " + std::to_string(min_len) +
                     " values");
  }
}

void check_binary(const char* metric, std::span<const int> values) {
  for (int v : values) {
    if (v != 0 && v != 1) {
      throw ValueError(std::string(metric) + ": labels must be 0 or 1, got " + std::to_string(v));
    }
  }
}

struct Confusion {
  double tp = 0, tn = 0, fp = 0, fn = 0;
};

Confusion confusion(std::span<const int> predictions, std::span<const int> labels) {
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] == 1;
    const bool y = labels[i] == 1;
    if (p && y) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (y) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

}  // namespace

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  check_lengths("accuracy", predictions, labels, 1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    hits += predictions[i] == labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

Correlation matthews_corr(std::span<const int> predictions, std::span<const int> labels) {
  check_lengths("matthews_corr", predictions, labels, 1);
  check_binary("matthews_corr", predictions);
  check_binary("matthews_corr", labels);
  const Confusion c = confusion(predictions, labels);
  const double denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn);
  if (denom == 0.0) {
    return {0.0, true};
  }
  return {(c.tp * c.tn - c.fp * c.fn) / std::sqrt(denom), false};
}

double f1_binary(std::span<const int> predictions, std::span<const int> labels) {
  check_lengths("f1_binary", predictions, labels, 1);
  check_binary("f1_binary", predictions);
  check_binary("f1_binary", labels);
  const Confusion c = confusion(predictions, labels);
  if (c.tp + c.fp == 0.0 && c.tp + c.fn == 0.0) {
    return 1.0;
  }
  return 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn);
}

Correlation pearson_corr(std::span<const double> a, std::span<const double> b) {
  check_lengths("pearson_corr", a, b, 2);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    return {0.0, true};
  }
  const double r = sab / std::sqrt(saa * sbb);
  return {std::clamp(r, -1.0, 1.0), false};
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return values[x] < values[y]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) {
      ++j;
    }
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      ranks[order[k]] = rank;
    }
    i = j + 1;
  }
  return ranks;
}

Correlation spearman_corr(std::span<const double> a, std::span<const double> b) {
  check_lengths("spearman_corr", a, b, 2);
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  return pearson_corr(ra, rb);
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths("roc_auc", scores, labels, 1);
  check_binary("roc_auc", labels);
  const std::vector<double> ranks = average_ranks(scores);
  double positives = 0.0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      ++positives;
      rank_sum += ranks[i];
    }
  }
  const double negatives = static_cast<double>(labels.size()) - positives;
  if (positives == 0.0 || negatives == 0.0) {
    throw ValueError("degenerate AUC: labels contain a single class");
  }
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) {
    throw ValueError("mean_std: no values");
  }
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) {
    return {mean, 0.0};
  }
  double ss = 0.0;
  for (double v : values) {
    ss += (v - mean) * (v - mean);
  }
  return {mean, std::sqrt(ss / (n - 1.0))};
}

}  // namespace rtdforge
