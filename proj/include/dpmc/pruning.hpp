// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// Iterative magnitude pruning under DPSGD, in the structured (whole-block
// drop) and unstructured (scattered mask with weight reset) variants.
//
// Conventions shared by both:
//  - magnitude ranking is over prunable weights only, with the strict total
//    order (|w|, coordinate index): ties always resolve to the lower index;
//  - the block-drop heuristic picks argmax_i |W_i ∩ W_min| with block ties
//    resolved to the lowest current index;
//  - cumulative unstructured targets are fractions of the ORIGINAL prunable
//    count (the reset step restores pre-trained values every round, which
//    makes "fraction of remaining" ill-defined), and previously pruned
//    coordinates stay pruned (they sit at |0| anyway; forcing them keeps the
//    mask monotone under exact-zero ties);
//  - per-round fine-tuning uses seeds derived from (seed, round) while the
//    final fine-tune consumes the config's own seed streams, so a run with
//    zero rounds is bit-identical to a plain fine-tune with the same config.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "dpmc/accountant.hpp"
#include "dpmc/dataset.hpp"
#include "dpmc/dp_sgd.hpp"
#include "dpmc/error.hpp"
#include "dpmc/model.hpp"
#include "dpmc/rng.hpp"

namespace dpmc {

struct ImpConfig {
  double alpha_pct = 10.0;          // % of weights ranked into W_min per round
  std::size_t steps_per_round = 0;  // N: DPSGD iterations before each prune
  std::size_t final_steps = 0;      // M: DPSGD iterations after the loop

  void validate() const {
    if (!(alpha_pct > 0.0 && alpha_pct <= 100.0)) {
      throw ConfigError("imp: alpha must lie in (0, 100]");
    }
  }
};

/// Indices of the k smallest coordinates by (|w|, index). The comparator is
/// a strict total order, so the selected set is unique and deterministic.
inline std::vector<std::size_t> lowest_magnitude(std::span<const double> w,
                                                 std::size_t k) {
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  const auto less = [&w](std::size_t a, std::size_t b) {
    const double ma = std::abs(w[a]);
    const double mb = std::abs(w[b]);
    return ma != mb ? ma < mb : a < b;
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k),
                   idx.end(), less);
  idx.resize(k);
  return idx;
}

/// Snapshot of one structured drop decision, enough to recompute the argmax
/// independently.
struct StructuredDropEvent {
  std::size_t round = 0;            // 1-based
  std::vector<double> weights;      // prunable values at decision time
  std::vector<int> block_of;       // owning block per coordinate
  std::size_t w_min_size = 0;
  int dropped_index = -1;          // current block numbering
  int dropped_origin = -1;         // original teacher block label
};
using StructuredObserver = std::function<void(const StructuredDropEvent&)>;

/// Structured variant: L rounds of (fine-tune N steps, locate the block
/// holding the most of the bottom-alpha% weights, drop it), then M final
/// fine-tune steps. The noise multiplier in `dp` applies to every step; the
/// accountant (optional) is charged L*N + M steps.
inline LayeredClassifier structured_dpimp(
    LayeredClassifier model, std::size_t layers_to_drop, const ImpConfig& imp,
    const DpSgdConfig& dp, const Dataset& data, RdpAccountant* accountant,
    const StructuredObserver& observer = {}) {
  imp.validate();
  dp.validate();
  if (layers_to_drop >= model.block_count()) {
    throw ConfigError("structured_dpimp: cannot drop " +
                      std::to_string(layers_to_drop) + " of " +
                      std::to_string(model.block_count()) + " blocks");
  }
  const BatchLossFactory loss = hard_label_loss(data);
  for (std::size_t round = 1; round <= layers_to_drop; ++round) {
    DpSgdConfig round_cfg = dp;
    round_cfg.seed = derive_seed(dp.seed, 100 + round);
    fine_tune(model, data, loss, imp.steps_per_round, round_cfg, accountant,
              "prune-round");

    const std::vector<double> weights = model.prunable_values();
    const std::vector<int> block_of = model.prunable_block_of();
    const std::size_t k = static_cast<std::size_t>(
        std::llround(imp.alpha_pct / 100.0 * static_cast<double>(weights.size())));
    const std::vector<std::size_t> w_min = lowest_magnitude(weights, k);
    std::vector<std::size_t> overlap(model.block_count(), 0);
    for (const std::size_t coord : w_min) {
      ++overlap[static_cast<std::size_t>(block_of[coord])];
    }
    std::size_t target = 0;
    for (std::size_t b = 1; b < overlap.size(); ++b) {
      if (overlap[b] > overlap[target]) target = b;  // ties -> lowest index
    }
    if (observer) {
      observer({round, weights, block_of, k, static_cast<int>(target),
                model.block_origins()[target]});
    }
    model.drop_block(target);
  }
  fine_tune(model, data, loss, imp.final_steps, dp, accountant, "final-finetune");
  return model;
}

/// Snapshot of one unstructured round, taken after the reset.
struct UnstructuredRoundEvent {
  std::size_t round = 0;  // 1-based
  const LayeredClassifier& model;
  const PruneMask& mask;
};
using UnstructuredObserver = std::function<void(const UnstructuredRoundEvent&)>;

/// Unstructured variant with weight reset. Each of ceil(S/alpha) rounds:
/// fine-tune N steps, extend the mask to min(alpha*i, S)% of the original
/// prunable count by current magnitude, reset every surviving parameter to
/// its pre-loop value, re-apply the mask. Then M final fine-tune steps train
/// the surviving subnetwork. Returns the masked model (mask attached).
inline LayeredClassifier unstructured_dpimp(
    LayeredClassifier model, double sparsity_pct, const ImpConfig& imp,
    const DpSgdConfig& dp, const Dataset& data, RdpAccountant* accountant,
    const UnstructuredObserver& observer = {}) {
  imp.validate();
  dp.validate();
  if (!(sparsity_pct > 0.0 && sparsity_pct < 100.0)) {
    throw ConfigError("unstructured_dpimp: sparsity must lie in (0, 100)");
  }
  const std::vector<double> original = model.flatten();
  const std::size_t prunable = model.prunable_count();
  const std::size_t rounds = static_cast<std::size_t>(
      std::ceil(sparsity_pct / imp.alpha_pct - 1e-12));
  const BatchLossFactory loss = hard_label_loss(data);

  PruneMask mask;
  mask.keep.assign(prunable, 1);
  std::size_t pruned = 0;
  for (std::size_t round = 1; round <= rounds; ++round) {
    DpSgdConfig round_cfg = dp;
    round_cfg.seed = derive_seed(dp.seed, 200 + round);
    fine_tune(model, data, loss, imp.steps_per_round, round_cfg, accountant,
              "prune-round");

    const double cumulative_pct =
        std::min(imp.alpha_pct * static_cast<double>(round), sparsity_pct);
    const std::size_t target_pruned = static_cast<std::size_t>(
        std::llround(cumulative_pct / 100.0 * static_cast<double>(prunable)));

    if (target_pruned > pruned) {
      const std::vector<double> weights = model.prunable_values();
      std::vector<std::size_t> surviving;
      surviving.reserve(prunable - pruned);
      for (std::size_t i = 0; i < prunable; ++i) {
        if (mask.keep[i]) surviving.push_back(i);
      }
      const auto less = [&weights](std::size_t a, std::size_t b) {
        const double ma = std::abs(weights[a]);
        const double mb = std::abs(weights[b]);
        return ma != mb ? ma < mb : a < b;
      };
      const std::size_t extra = target_pruned - pruned;
      std::nth_element(surviving.begin(),
                       surviving.begin() + static_cast<std::ptrdiff_t>(extra),
                       surviving.end(), less);
      for (std::size_t j = 0; j < extra; ++j) mask.keep[surviving[j]] = 0;
      pruned = target_pruned;
    }
    mask.iteration = static_cast<int>(round);
    mask.target_sparsity_pct = cumulative_pct;

    // Reset: every parameter back to its pre-loop value, then the mask pins
    // the pruned coordinates to zero again.
    model.clear_mask();
    model.unflatten(original);
    model.apply_mask(mask);
    if (observer) observer({round, model, mask});
  }
  fine_tune(model, data, loss, imp.final_steps, dp, accountant, "final-finetune");
  return model;
}

}  // namespace dpmc
