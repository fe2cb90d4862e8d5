// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end pipelines: non-private pre-training, budget-calibrated DPSGD
// fine-tuning, distillation with privately trained teachers, and the two
// private pruning runs. Each training phase seeds its sampling/noise streams
// from derive_seed(config seed, phase tag) so phases are reproducible in
// isolation; tags are public for tests.

#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dpmc/accountant.hpp"
#include "dpmc/dataset.hpp"
#include "dpmc/distill.hpp"
#include "dpmc/dp_sgd.hpp"
#include "dpmc/error.hpp"
#include "dpmc/model.hpp"
#include "dpmc/pruning.hpp"

namespace dpmc {

namespace phase_seed {
inline constexpr std::uint64_t kTeacher = 1;
inline constexpr std::uint64_t kStudent = 2;
inline constexpr std::uint64_t kStudentInit = 3;
}  // namespace phase_seed

/// Plain (non-private) SGD training: sigma = 0, clipping disabled,
/// fixed-size shuffled batches. Used to emulate public pre-training.
inline LayeredClassifier pretrain(LayeredClassifier model, const Dataset& data,
                                  std::size_t steps, double learning_rate,
                                  double batch_size, std::uint64_t seed) {
  DpSgdConfig cfg;
  cfg.clip_norm = std::numeric_limits<double>::infinity();
  cfg.noise_multiplier = 0.0;
  cfg.learning_rate = learning_rate;
  cfg.expected_batch_size = batch_size;
  cfg.poisson_sampling = false;
  cfg.seed = seed;
  fine_tune(model, data, hard_label_loss(data), steps, cfg, nullptr, "pretrain");
  return model;
}

struct FinetuneResult {
  LayeredClassifier model;
  RdpAccountant accountant;
  double sigma = 0.0;
  std::uint64_t steps = 0;
};

/// DPSGD fine-tuning with the noise multiplier calibrated so that `steps`
/// steps at rate q = b/N spend at most the target budget. The accountant is
/// hard-capped at the target.
inline FinetuneResult dp_finetune(LayeredClassifier model, const Dataset& data,
                                  PrivacyBudget budget, DpSgdConfig dp,
                                  std::uint64_t steps) {
  budget.validate_target();
  dp.validate();
  const double q = std::min(1.0, dp.expected_batch_size /
                                     static_cast<double>(data.size()));
  dp.noise_multiplier = calibrate_sigma(budget, q, steps).sigma;
  FinetuneResult result;
  result.sigma = dp.noise_multiplier;
  result.steps = steps;
  result.accountant.set_hard_cap(budget);
  fine_tune(model, data, hard_label_loss(data), steps, dp, &result.accountant,
            "finetune");
  result.model = std::move(model);
  return result;
}

struct DpkdResult {
  LayeredClassifier teacher;  // privately fine-tuned
  LayeredClassifier student;
  RdpAccountant accountant;
  BudgetAllocation allocation;
};

/// Private distillation:
///  1. split the budget by calibrating one shared noise multiplier over
///     teacher_steps + distill_steps (throws CalibrationError up front if
///     the target is unreachable);
///  2. fine-tune the teacher with DPSGD;
///  3. initialize the student (zero-shot PT copies the pre-trained teacher,
///     zero-shot FT the fine-tuned one, random draws fresh weights) -- no
///     phase touches the raw data, so initialization charges (0, 0);
///  4. train the student on the distillation objective with DPSGD.
inline DpkdResult dpkd(const LayeredClassifier& pretrained_teacher,
                       InitKind student_init, std::size_t student_blocks,
                       const Dataset& data, PrivacyBudget total,
                       const KdConfig& kd, DpSgdConfig dp,
                       std::uint64_t teacher_steps, std::uint64_t distill_steps) {
  total.validate_target();
  kd.validate();
  dp.validate();
  const double q = std::min(1.0, dp.expected_batch_size /
                                     static_cast<double>(data.size()));
  DpkdResult result;
  result.allocation =
      allocate_shared_sigma(total, q, teacher_steps, distill_steps);
  result.accountant.set_hard_cap(total);
  dp.noise_multiplier = result.allocation.sigma;

  result.teacher = pretrained_teacher;
  DpSgdConfig teacher_cfg = dp;
  teacher_cfg.seed = derive_seed(dp.seed, phase_seed::kTeacher);
  fine_tune(result.teacher, data, hard_label_loss(data), teacher_steps,
            teacher_cfg, &result.accountant, "teacher-finetune");

  InitStrategy strategy;
  strategy.kind = student_init;
  switch (student_init) {
    case InitKind::kRandom:
      strategy.seed = derive_seed(dp.seed, phase_seed::kStudentInit);
      break;
    case InitKind::kZeroShotPt:
      strategy.checkpoint = &pretrained_teacher;
      break;
    case InitKind::kZeroShotFt:
      strategy.checkpoint = &result.teacher;
      break;
  }
  result.student = init_student(result.teacher, student_blocks, strategy);

  DpSgdConfig student_cfg = dp;
  student_cfg.seed = derive_seed(dp.seed, phase_seed::kStudent);
  fine_tune(result.student, data, distillation_loss(data, result.teacher, kd),
            distill_steps, student_cfg, &result.accountant, "distill");
  return result;
}

struct ImpResult {
  LayeredClassifier model;
  RdpAccountant accountant;
  double sigma = 0.0;
  std::vector<int> dropped_blocks;  // structured only, original labels
};

/// Structured pruning under one calibrated noise multiplier across all
/// L * N + M steps (the budget is split equally per iteration by sharing
/// sigma).
inline ImpResult structured_dpimp_private(
    LayeredClassifier model, std::size_t layers_to_drop, const ImpConfig& imp,
    DpSgdConfig dp, const Dataset& data, PrivacyBudget budget) {
  budget.validate_target();
  const double q = std::min(1.0, dp.expected_batch_size /
                                     static_cast<double>(data.size()));
  const std::uint64_t total_steps =
      static_cast<std::uint64_t>(layers_to_drop) * imp.steps_per_round +
      imp.final_steps;
  dp.noise_multiplier = calibrate_sigma(budget, q, total_steps).sigma;
  ImpResult result;
  result.sigma = dp.noise_multiplier;
  result.accountant.set_hard_cap(budget);
  std::vector<int>& dropped = result.dropped_blocks;
  result.model = structured_dpimp(
      std::move(model), layers_to_drop, imp, dp, data, &result.accountant,
      [&dropped](const StructuredDropEvent& e) {
        dropped.push_back(e.dropped_origin);
      });
  return result;
}

/// Unstructured pruning with reset; one calibrated noise multiplier across
/// all ceil(S/alpha) * N + M steps.
inline ImpResult unstructured_dpimp_private(LayeredClassifier model,
                                            double sparsity_pct,
                                            const ImpConfig& imp, DpSgdConfig dp,
                                            const Dataset& data,
                                            PrivacyBudget budget) {
  budget.validate_target();
  const double q = std::min(1.0, dp.expected_batch_size /
                                     static_cast<double>(data.size()));
  const std::uint64_t rounds = static_cast<std::uint64_t>(
      std::ceil(sparsity_pct / imp.alpha_pct - 1e-12));
  const std::uint64_t total_steps = rounds * imp.steps_per_round + imp.final_steps;
  dp.noise_multiplier = calibrate_sigma(budget, q, total_steps).sigma;
  ImpResult result;
  result.sigma = dp.noise_multiplier;
  result.accountant.set_hard_cap(budget);
  result.model = unstructured_dpimp(std::move(model), sparsity_pct, imp, dp,
                                    data, &result.accountant);
  return result;
}

}  // namespace dpmc
