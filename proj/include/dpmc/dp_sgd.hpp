// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// DPSGD: per-example gradients, l2 clipping, Gaussian noising of the clipped
// sum, and the parameter update. Conventions:
//  - noise is added to the SUM of clipped gradients, then the sum is divided
//    by the EXPECTED batch size (matching the sensitivity analysis the
//    accountant assumes);
//  - batches come from Poisson subsampling at rate q = b/N by default;
//    fixed-size shuffled batches are available behind a flag, in which case
//    the accountant treats q = b/N as an approximation;
//  - per-example backward passes run with microbatch size 1 and may execute
//    in parallel; gradients land in per-example slots and are reduced in
//    ascending batch order, so results do not depend on scheduling;
//  - noise draws come from one seeded stream in coordinate order, one draw
//    per trainable coordinate per step (mask state does not change the draw
//    sequence). With sigma = 0 the stream is not consumed at all.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include "dpmc/accountant.hpp"
#include "dpmc/dataset.hpp"
#include "dpmc/error.hpp"
#include "dpmc/model.hpp"
#include "dpmc/parallel.hpp"
#include "dpmc/rng.hpp"
#include "dpmc/tensor.hpp"

namespace dpmc {

struct DpSgdConfig {
  double clip_norm = 1.0;  // +infinity disables clipping
  double noise_multiplier = 0.0;
  double learning_rate = 0.05;
  double expected_batch_size = 128.0;
  std::uint64_t seed = 0;
  bool poisson_sampling = true;

  void validate() const {
    if (!(clip_norm > 0.0)) throw ConfigError("dpsgd: clip_norm must be > 0");
    if (!(noise_multiplier >= 0.0)) throw ConfigError("dpsgd: sigma must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("dpsgd: learning_rate must be > 0");
    if (!(expected_batch_size >= 1.0)) {
      throw ConfigError("dpsgd: expected_batch_size must be >= 1");
    }
  }
};

/// Per-example gradient vectors in the model's registry coordinate order.
/// Masked-out coordinates are identically zero.
struct GradientBatch {
  std::size_t dim = 0;
  std::vector<std::vector<double>> per_example;

  std::size_t size() const { return per_example.size(); }
};

inline double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (const double x : v) acc += x * x;
  return std::sqrt(acc);
}

/// Rescales each example's gradient g to g * min(1, C / |g|). Vectors whose
/// norm is already within C pass through untouched (no multiply at all).
inline GradientBatch clip_per_example(GradientBatch grads, double clip_norm) {
  if (!(clip_norm > 0.0)) throw ConfigError("clip_per_example: C must be > 0");
  if (std::isinf(clip_norm)) return grads;
  for (auto& g : grads.per_example) {
    const double norm = l2_norm(g);
    if (norm <= clip_norm) continue;
    const double factor = clip_norm / norm;
    for (double& x : g) x *= factor;
  }
  return grads;
}

/// (sum of clipped gradients + N(0, sigma^2 C^2 I)) / expected_batch_size.
/// Sums run in ascending example order; one noise draw per coordinate.
inline std::vector<double> noisy_aggregate(const GradientBatch& clipped,
                                           double sigma, double clip_norm,
                                           double expected_batch_size,
                                           GaussianSampler& noise) {
  std::vector<double> acc(clipped.dim, 0.0);
  for (const auto& g : clipped.per_example) {
    for (std::size_t i = 0; i < clipped.dim; ++i) acc[i] += g[i];
  }
  if (sigma > 0.0) {
    const double scale = sigma * (std::isinf(clip_norm) ? 1.0 : clip_norm);
    for (std::size_t i = 0; i < clipped.dim; ++i) {
      acc[i] += scale * noise.next();
    }
  }
  for (std::size_t i = 0; i < clipped.dim; ++i) acc[i] /= expected_batch_size;
  return acc;
}

/// Builds the scalar loss for one example on its tape. `slot` indexes into
/// the batch passed to the factory.
using PerExampleLoss = std::function<Var(Tape&, Var logits, std::size_t slot)>;

/// Called once per step with the sampled batch; returns the per-example loss
/// closure (e.g. after computing teacher logits for the batch).
using BatchLossFactory =
    std::function<PerExampleLoss(std::span<const std::size_t> batch)>;

/// Plain supervised objective: cross-entropy against the dataset labels.
inline BatchLossFactory hard_label_loss(const Dataset& data) {
  return [&data](std::span<const std::size_t> batch) -> PerExampleLoss {
    std::vector<int> labels = data.labels_of(batch);
    return [labels = std::move(labels)](Tape& tape, Var logits,
                                        std::size_t slot) {
      return tape.cross_entropy(logits, std::span<const int>(&labels[slot], 1));
    };
  };
}

/// One backward pass per example (microbatch size 1), parallel over the
/// batch. Slot k of the result is example batch[k]'s gradient.
inline GradientBatch per_example_gradients(const LayeredClassifier& model,
                                           const Dataset& data,
                                           std::span<const std::size_t> batch,
                                           const PerExampleLoss& loss) {
  GradientBatch out;
  out.dim = model.param_count();
  out.per_example.resize(batch.size());
  parallel_for(batch.size(), [&](std::size_t k) {
    Tensor x({1, data.feature_dim});
    const auto row = data.row(batch[k]);
    std::copy(row.begin(), row.end(), x.data());
    Tape tape;
    const LayeredClassifier::TapeBinding binding = model.forward_tape(tape, x);
    const Var l = loss(tape, binding.logits, k);
    tape.backward(l);
    out.per_example[k] = model.collect_grad(tape, binding);
  });
  return out;
}

/// Poisson subsampling at rate q = b/N (default), or fixed-size shuffled
/// batches when poisson is off. Both draw from one seeded stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, double expected_batch_size,
               bool poisson, std::uint64_t seed)
      : n_(dataset_size),
        batch_(static_cast<std::size_t>(expected_batch_size)),
        q_(expected_batch_size / static_cast<double>(dataset_size)),
        poisson_(poisson),
        rng_(seed) {
    if (q_ > 1.0) q_ = 1.0;
    if (!poisson_) {
      order_.resize(n_);
      std::iota(order_.begin(), order_.end(), 0);
      cursor_ = n_;  // force shuffle on first use
    }
  }

  double rate() const { return q_; }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> batch;
    if (poisson_) {
      for (std::size_t i = 0; i < n_; ++i) {
        if (rng_.uniform() < q_) batch.push_back(i);
      }
    } else {
      batch.reserve(batch_);
      for (std::size_t k = 0; k < batch_; ++k) {
        if (cursor_ >= n_) {
          rng_.shuffle(order_);
          cursor_ = 0;
        }
        batch.push_back(order_[cursor_++]);
      }
    }
    return batch;
  }

 private:
  std::size_t n_;
  std::size_t batch_;
  double q_;
  bool poisson_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// One DPSGD step on an already-sampled batch: per-example gradients, clip,
/// noisy aggregate, parameter update. The accountant is charged before the
/// model is touched, so a budget-exhausted error leaves the model unchanged.
inline void dpsgd_step(LayeredClassifier& model, const Dataset& data,
                       std::span<const std::size_t> batch,
                       const BatchLossFactory& factory, const DpSgdConfig& cfg,
                       double sampling_rate, GaussianSampler& noise,
                       RdpAccountant* accountant, std::string_view phase) {
  if (accountant != nullptr) {
    accountant->charge(phase, sampling_rate, cfg.noise_multiplier, 1);
  }
  GradientBatch grads;
  if (batch.empty()) {
    grads.dim = model.param_count();
  } else {
    const PerExampleLoss loss = factory(batch);
    grads = per_example_gradients(model, data, batch, loss);
  }
  grads = clip_per_example(std::move(grads), cfg.clip_norm);
  std::vector<double> update = noisy_aggregate(
      grads, cfg.noise_multiplier, cfg.clip_norm, cfg.expected_batch_size, noise);
  for (double& u : update) u *= cfg.learning_rate;
  model.apply_update(update);
}

/// Runs `steps` DPSGD steps. Sampling and noise use independent streams
/// derived from cfg.seed, so a sigma=0 run draws identical batches to a
/// noisy one with the same seed.
inline void fine_tune(LayeredClassifier& model, const Dataset& data,
                      const BatchLossFactory& factory, std::size_t steps,
                      const DpSgdConfig& cfg, RdpAccountant* accountant,
                      std::string_view phase) {
  cfg.validate();
  if (!cfg.poisson_sampling && accountant != nullptr) {
    std::cerr << "[dpmc] note: fixed-size batches in phase '" << phase
              << "'; accounting with q = b/N is approximate\n";
  }
  BatchSampler sampler(data.size(), cfg.expected_batch_size,
                       cfg.poisson_sampling, derive_seed(cfg.seed, 0));
  GaussianSampler noise(derive_seed(cfg.seed, 1));
  for (std::size_t s = 0; s < steps; ++s) {
    const std::vector<std::size_t> batch = sampler.next();
    dpsgd_step(model, data, batch, factory, cfg, sampler.rate(), noise,
               accountant, phase);
  }
}

}  // namespace dpmc
