#pragma once

// Evaluation metrics: average precision, mean AP, accuracy and cross-modal
// alignment.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "computer/autodiff.hpp"

namespace computer {

/// Average precision over distinct score thresholds:
///   AP = sum_k (R_k - R_{k-1}) P_k
/// where k runs over distinct scores in descending order and tied items enter
/// together. Constant scores give the positive rate. Returns nullopt when
/// there are no positives.
inline std::optional<double> average_precision(std::span<const double> scores,
                                               std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw DimensionError("average_precision: " + std::to_string(scores.size()) +
                         " scores for " + std::to_string(labels.size()) + " labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ConfigError("average_precision: label not in {0,1}");
    positives += static_cast<std::size_t>(y);
  }
  if (positives == 0) return std::nullopt;
  double ap = 0;
  std::size_t tp = 0, seen = 0, prev_tp = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    for (; k < order.size() && scores[order[k]] == s; ++k) {
      tp += static_cast<std::size_t>(labels[order[k]]);
      ++seen;
    }
    if (tp != prev_tp) {
      const double dr = static_cast<double>(tp - prev_tp) / static_cast<double>(positives);
      ap += dr * (static_cast<double>(tp) / static_cast<double>(seen));
      prev_tp = tp;
    }
  }
  return ap;
}

/// Mean of per-class AP over classes with at least one positive; scores and
/// labels are items x classes. Returns 0 when no class has a positive.
inline double mean_average_precision(const Tensor<double>& scores, const Tensor<double>& labels) {
  if (scores.shape() != labels.shape())
    throw DimensionError("mAP: scores " + shape_str(scores.shape()) + " vs labels " +
                         shape_str(labels.shape()));
  double sum = 0;
  std::size_t counted = 0;
  std::vector<double> s(scores.rows());
  std::vector<int> y(scores.rows());
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      s[i] = scores(i, c);
      y[i] = static_cast<int>(labels(i, c));
    }
    if (auto ap = average_precision(s, y)) {
      sum += *ap;
      ++counted;
    }
  }
  return counted ? sum / static_cast<double>(counted) : 0.0;
}

/// Fraction of rows whose arg-max (first on ties) equals the target.
inline double accuracy(const Tensor<double>& probs, std::span<const std::size_t> targets) {
  if (probs.rows() != targets.size())
    throw DimensionError("accuracy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(probs.rows()) + " rows");
  if (targets.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto row = probs.row_span(i);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    hit += best == targets[i];
  }
  return static_cast<double>(hit) / static_cast<double>(targets.size());
}

/// Mean cosine between matching rows of the two modality outputs.
inline double alignment(const Tensor<double>& vis, const Tensor<double>& key) {
  if (vis.shape() != key.shape())
    throw DimensionError("alignment: " + shape_str(vis.shape()) + " vs " + shape_str(key.shape()));
  if (vis.rows() == 0) return 0.0;
  double sum = 0;
  for (std::size_t i = 0; i < vis.rows(); ++i)
    sum += cosine_sim<double>(vis.row_span(i), key.row_span(i)).value;
  return sum / static_cast<double>(vis.rows());
}

}  // namespace computer
