// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// Knowledge-distillation loss machinery. The objective is
//   L(W_s) = H(y_true, P_s) + lambda * H(P_t, P_s)
// where the second term evaluates both distributions at temperature T and
// the hard-label term runs at T = 1. There is no T^2 rescaling of the
// distillation gradient: the objective is implemented literally as written
// (Hinton's convention would multiply the soft term's gradient by T^2).
// Teacher logits enter as constants; no gradient can reach them.

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dpmc/dataset.hpp"
#include "dpmc/dp_sgd.hpp"
#include "dpmc/error.hpp"
#include "dpmc/model.hpp"
#include "dpmc/tensor.hpp"

namespace dpmc {

struct KdConfig {
  double lambda = 1.0;      // weight of the distillation term
  double temperature = 2.0;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("kd: lambda must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("kd: temperature must be > 0");
  }
};

/// Row-wise p_i = exp(z_i / T) / sum_j exp(z_j / T), with max subtraction.
/// Accepts a single logit row [k] or a batch [b x k].
inline Tensor softmax_temperature(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) {
    throw ConfigError("softmax_temperature: T must be > 0");
  }
  const std::size_t rows = logits.shape().size() == 2 ? logits.rows() : 1;
  const std::size_t cols = logits.cols();
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* z = logits.data() + i * cols;
    double* p = out.data() + i * cols;
    double mx = z[0] / temperature;
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, z[j] / temperature);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      p[j] = std::exp(z[j] / temperature - mx);
      sum += p[j];
    }
    for (std::size_t j = 0; j < cols; ++j) p[j] /= sum;
  }
  return out;
}

/// Distillation objective on the tape. With lambda = 0 this IS the hard
/// cross-entropy node, so a lambda = 0 run is bit-identical to plain
/// fine-tuning. teacher_logits never join the tape; they are post-processed
/// into soft targets outside the gradient path.
inline Var kd_loss(Tape& tape, Var student_logits, const Tensor& teacher_logits,
                   std::span<const int> labels, const KdConfig& cfg) {
  cfg.validate();
  const Tensor& sl = tape.value(student_logits);
  if (!sl.same_shape(teacher_logits) || sl.rows() != labels.size()) {
    throw ShapeError("kd_loss: student " + sl.shape_str() + ", teacher " +
                     teacher_logits.shape_str() + ", " +
                     std::to_string(labels.size()) + " labels");
  }
  const Var hard = tape.cross_entropy(student_logits, labels);
  if (cfg.lambda == 0.0) return hard;
  const Tensor soft_targets = softmax_temperature(teacher_logits, cfg.temperature);
  const Var tempered = tape.scale(student_logits, 1.0 / cfg.temperature);
  const Var soft = tape.soft_cross_entropy(soft_targets, tempered);
  return tape.add(hard, tape.scale(soft, cfg.lambda));
}

/// Batch loss factory for DPSGD distillation: teacher logits are computed
/// once per sampled batch (forward only) and sliced per example.
inline BatchLossFactory distillation_loss(const Dataset& data,
                                          const LayeredClassifier& teacher,
                                          const KdConfig& cfg) {
  cfg.validate();
  return [&data, &teacher, cfg](std::span<const std::size_t> batch) -> PerExampleLoss {
    Tensor teacher_logits = teacher.forward(data.features_of(batch));
    std::vector<int> labels = data.labels_of(batch);
    return [teacher_logits = std::move(teacher_logits),
            labels = std::move(labels), cfg](Tape& tape, Var logits,
                                             std::size_t slot) {
      const std::size_t k = teacher_logits.cols();
      Tensor row({1, k});
      std::copy(teacher_logits.data() + slot * k,
                teacher_logits.data() + (slot + 1) * k, row.data());
      return kd_loss(tape, logits, row,
                     std::span<const int>(&labels[slot], 1), cfg);
    };
  };
}

}  // namespace dpmc
