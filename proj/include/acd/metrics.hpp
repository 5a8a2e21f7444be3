#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "acd/errors.hpp"
#include "acd/threshold.hpp"

namespace acd {

// Pairwise ranking AUC over a flat list of (score, label) pairs: the share of
// (positive, negative) pairs where the positive scores higher, ties counting
// one half. Empty when either class of label is absent.
inline std::optional<double> auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the win count: 2 per strict win, 1 per tie.
  unsigned long long doubled = 0, neg_below = 0, pos_total = 0, neg_total = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    unsigned long long pos_here = 0, neg_here = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos_here : neg_here)++;
      ++j;
    }
    doubled += pos_here * (2 * neg_below + neg_here);
    neg_below += neg_here;
    pos_total += pos_here;
    neg_total += neg_here;
    i = j;
  }
  if (pos_total == 0 || neg_total == 0) return std::nullopt;
  return static_cast<double>(doubled) / static_cast<double>(2 * pos_total * neg_total);
}

// Mean over the N classes of the per-class binary F1 across all queries.
// A class with 2·tp + fp + fn == 0 scores 0.
inline double macro_f1(const std::vector<LabelSet>& predicted, const std::vector<std::vector<int>>& labels,
                       std::size_t n_way) {
  if (predicted.size() != labels.size() || predicted.empty())
    throw ShapeError("macro_f1 needs one prediction per query and at least one query");
  double total = 0.0;
  for (std::size_t c = 0; c < n_way; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t q = 0; q < labels.size(); ++q) {
      const bool pred = predicted[q].count(c) > 0;
      const bool truth = labels[q].at(c) != 0;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    total += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return total / static_cast<double>(n_way);
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

inline MeanStd mean_std(std::span<const double> v) {
  if (v.empty()) return {};
  double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

}  // namespace acd
