#pragma once

// Cross-modal consistency loss and the task losses.

#include <algorithm>
#include <cmath>
#include <compare>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "computer/autodiff.hpp"
#include "computer/errors.hpp"

namespace computer {

/// Identity of an actor within a data set: (video index, actor index).
struct ActorId {
  std::size_t video = 0;
  std::size_t actor = 0;
  auto operator<=>(const ActorId&) const = default;
};

struct LossConfig {
  double temperature = 1.0;
  /// Adds the positive pair to the denominator (standard InfoNCE).
  bool include_positive_in_denominator = false;
  double consistency_weight = 1.0;
  /// Averages the vis->key and key->vis directions.
  bool bidirectional = false;

  void validate() const {
    if (!(temperature > 0))
      throw ConfigError("loss: temperature must be > 0, got " + std::to_string(temperature));
    if (!(consistency_weight >= 0))
      throw ConfigError("loss: consistency weight must be >= 0, got " +
                        std::to_string(consistency_weight));
  }
};

/// Loss from a precomputed similarity matrix S (rows: anchors): mean over i
/// of -S_ii/tau + log sum_{k != i} exp(S_ik/tau). Logits are shifted by
/// -1/tau before exponentiation (cosine <= 1).
template <std::floating_point T>
Var<T> consistency_from_similarity(const Var<T>& sim, const LossConfig& cfg) {
  auto& tape = sim.tape();
  const std::size_t n = sim.rows();
  if (sim.cols() != n)
    throw DimensionError("consistency: similarity must be square, got " +
                         shape_str(sim.value().shape()));
  const T inv_tau = T(1) / static_cast<T>(cfg.temperature);
  Var<T> s = scale(sim, inv_tau);
  Tensor<T> mask({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      mask(i, j) = (i != j || cfg.include_positive_in_denominator) ? T(1) : T(0);
  Var<T> denom = row_sum(mul(exp(add_scalar(s, -inv_tau)), tape.constant(mask)));
  Var<T> pos = row_sum(mul(s, tape.constant(Tensor<T>::identity(n))));
  return mean_all(sub(add_scalar(log(denom), inv_tau), pos));
}

/// Contrastive consistency between the refined visual and keypoint rows of
/// the same actors; row b of vis and key form the positive pair.
template <std::floating_point T>
Var<T> consistency_loss(const Var<T>& vis, const Var<T>& key,
                        std::span<const ActorId> ids, const LossConfig& cfg) {
  cfg.validate();
  if (vis.value().shape() != key.value().shape())
    throw DimensionError("consistency: vis " + shape_str(vis.value().shape()) +
                         " vs key " + shape_str(key.value().shape()));
  if (vis.rows() < 2)
    throw DimensionError("consistency: need at least 2 rows, got " +
                         std::to_string(vis.rows()));
  if (ids.size() != vis.rows())
    throw DimensionError("consistency: " + std::to_string(ids.size()) + " ids for " +
                         std::to_string(vis.rows()) + " rows");
  std::vector<ActorId> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  if (auto it = std::adjacent_find(sorted.begin(), sorted.end()); it != sorted.end())
    throw ConfigError("consistency: duplicate actor (video " + std::to_string(it->video) +
                      ", actor " + std::to_string(it->actor) + ") in batch");
  Var<T> l = consistency_from_similarity(cosine_matrix(vis, key), cfg);
  if (!cfg.bidirectional) return l;
  return scale(add(l, consistency_from_similarity(cosine_matrix(key, vis), cfg)), T(0.5));
}

/// Mean binary cross-entropy; scores are clamped at 1e-7.
template <std::floating_point T>
Var<T> bce_loss(const Var<T>& scores, const Tensor<T>& targets) {
  return bce_mean(scores, targets);
}

/// Mean over rows of -log probs[target].
template <std::floating_point T>
Var<T> ce_loss(const Var<T>& probs, std::span<const std::size_t> targets) {
  return nll_mean(probs, targets);
}

/// Task loss plus the weighted consistency term. `consistency` is empty when
/// the term is off.
template <std::floating_point T>
Var<T> total_loss(const Var<T>& task, const std::optional<Var<T>>& consistency,
                  const LossConfig& cfg) {
  cfg.validate();
  if (!consistency || cfg.consistency_weight == 0) return task;
  return add(task, scale(*consistency, static_cast<T>(cfg.consistency_weight)));
}

}  // namespace computer
