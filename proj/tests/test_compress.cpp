// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "dpmc/distill.hpp"
#include "dpmc/pipeline.hpp"
#include "dpmc/pruning.hpp"
#include "oracles.hpp"

using dpmc::Dataset;
using dpmc::DpSgdConfig;
using dpmc::GaussianSampler;
using dpmc::ImpConfig;
using dpmc::InitKind;
using dpmc::KdConfig;
using dpmc::LayeredClassifier;
using dpmc::RdpAccountant;
using dpmc::Tape;
using dpmc::Tensor;
using dpmc::Var;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  GaussianSampler g(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = g.next();
  return t;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

// Brute-force drop decision: stable sort all prunable coordinates by
// (|w|, index), take the first k as W_min, count per block, argmax with
// lowest-index ties. Written independently of the library's nth_element
// selection.
int brute_force_drop(const std::vector<double>& w, const std::vector<int>& block_of,
                     std::size_t k, std::size_t block_count) {
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(w[a]) != std::abs(w[b]) ? std::abs(w[a]) < std::abs(w[b])
                                            : a < b;
  });
  std::vector<std::size_t> counts(block_count, 0);
  for (std::size_t i = 0; i < k; ++i) counts[static_cast<std::size_t>(block_of[idx[i]])]++;
  int best = 0;
  for (std::size_t b = 1; b < block_count; ++b) {
    if (counts[b] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(b);
  }
  return best;
}

}  // namespace

TEST_CASE("temperature 1 is the standard softmax") {
  const Tensor z = random_tensor({3, 4}, 1);
  const Tensor p = dpmc::softmax_temperature(z, 1.0);
  Tape tape;
  const Tensor ref = tape.value(tape.softmax(tape.leaf(z, false)));
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(p[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < 4; ++j) sum += p.at(0, j);
  CHECK(std::abs(sum - 1.0) <= 1e-12);
}

TEST_CASE("very large temperature flattens the distribution") {
  const Tensor z = random_tensor({1, 5}, 2);
  const Tensor p = dpmc::softmax_temperature(z, 1e9);
  for (std::size_t j = 0; j < 5; ++j) {
    CHECK(std::abs(p[j] - 0.2) < 1e-6);
  }
}

TEST_CASE("softmax_temperature matches independent arithmetic on [2,0] at T=2") {
  const Tensor z({2}, {2.0, 0.0});
  const Tensor p = dpmc::softmax_temperature(z, 2.0);
  const long double e = std::exp(1.0L);
  CHECK(p[0] == doctest::Approx(static_cast<double>(e / (1.0L + e))).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(static_cast<double>(1.0L / (1.0L + e))).epsilon(1e-14));
}

TEST_CASE("non-positive temperature is rejected") {
  const Tensor z({2}, {1.0, 2.0});
  CHECK_THROWS_AS((void)dpmc::softmax_temperature(z, 0.0), dpmc::ConfigError);
  KdConfig bad;
  bad.temperature = -1.0;
  CHECK_THROWS_AS(bad.validate(), dpmc::ConfigError);
}

TEST_CASE("kd loss with lambda 0 is exactly the hard cross entropy") {
  const Tensor student = random_tensor({4, 3}, 3);
  const Tensor teacher = random_tensor({4, 3}, 4);
  const std::vector<int> labels{0, 2, 1, 1};
  Tape tape;
  Var s = tape.leaf(student, false);
  const double kd = tape.value(dpmc::kd_loss(tape, s, teacher, labels, {0.0, 2.0}))[0];
  const double ce = tape.value(tape.cross_entropy(s, labels))[0];
  CHECK(kd == ce);
}

TEST_CASE("kd loss soft term at teacher==student is the tempered entropy") {
  const Tensor logits = random_tensor({3, 4}, 5);
  const std::vector<int> labels{1, 0, 3};
  const double temperature = 3.0;
  Tape tape;
  Var s = tape.leaf(logits, false);
  const double kd =
      tape.value(dpmc::kd_loss(tape, s, logits, labels, {1.0, temperature}))[0];
  const double ce = tape.value(tape.cross_entropy(s, labels))[0];
  const Tensor p = dpmc::softmax_temperature(logits, temperature);
  double entropy = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      entropy -= p.at(i, j) * std::log(p.at(i, j));
    }
  }
  entropy /= 3.0;
  CHECK(kd == doctest::Approx(ce + entropy).epsilon(1e-12));
}

TEST_CASE("kd loss matches the independent scalar reference") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor student = random_tensor({4, 3}, 600 + seed);
    const Tensor teacher = random_tensor({4, 3}, 700 + seed);
    const std::vector<int> labels{2, 0, 1, 2};
    Tape tape;
    Var s = tape.leaf(student, false);
    const double got =
        tape.value(dpmc::kd_loss(tape, s, teacher, labels, {0.5, 2.0}))[0];

    std::vector<std::vector<double>> sv(4, std::vector<double>(3));
    std::vector<std::vector<double>> tv(4, std::vector<double>(3));
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        sv[i][j] = student.at(i, j);
        tv[i][j] = teacher.at(i, j);
      }
    }
    const double want = oracles::kd_loss_reference(sv, tv, labels, 0.5, 2.0);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("kd loss rejects batch-size mismatches") {
  const Tensor student = random_tensor({4, 3}, 8);
  const Tensor teacher = random_tensor({3, 3}, 9);
  const std::vector<int> labels{0, 1, 2, 0};
  Tape tape;
  Var s = tape.leaf(student, false);
  CHECK_THROWS_AS((void)dpmc::kd_loss(tape, s, teacher, labels, {1.0, 2.0}),
                  dpmc::ShapeError);
}

TEST_CASE("no gradient reaches teacher logits through the kd loss") {
  const Tensor student = random_tensor({2, 3}, 10);
  const Tensor teacher = random_tensor({2, 3}, 11);
  const std::vector<int> labels{0, 1};
  Tape tape;
  Var s = tape.leaf(student, true);
  Var t = tape.leaf(teacher, true);  // on the tape, but kd uses values only
  Var loss = dpmc::kd_loss(tape, s, tape.value(t), labels, {1.0, 2.0});
  tape.backward(loss);
  const Tensor& gt = tape.grad(t);
  for (std::size_t i = 0; i < gt.size(); ++i) CHECK(gt[i] == 0.0);
  const Tensor& gs = tape.grad(s);
  double norm = 0.0;
  for (std::size_t i = 0; i < gs.size(); ++i) norm += gs[i] * gs[i];
  CHECK(norm > 0.0);
}

TEST_CASE("kd gradient through the full model matches finite differences") {
  LayeredClassifier model = LayeredClassifier::random({4, 6, 3}, 2, 12);
  const Tensor x = random_tensor({3, 4}, 13);
  const Tensor teacher_logits = random_tensor({3, 3}, 14);
  const std::vector<int> labels{0, 2, 1};
  const KdConfig kd{0.7, 2.0};

  Tape tape;
  const auto binding = model.forward_tape(tape, x);
  tape.backward(dpmc::kd_loss(tape, binding.logits, teacher_logits, labels, kd));
  const std::vector<double> analytic = model.collect_grad(tape, binding);

  auto eval = [&]() {
    Tape t;
    const auto b = model.forward_tape(t, x, false);
    return t.value(dpmc::kd_loss(t, b.logits, teacher_logits, labels, kd))[0];
  };
  double worst = 0.0;
  for (const auto& info : model.registry()) {
    Tensor& w = const_cast<Tensor&>(model.tensor_of(info));
    const std::vector<double> numeric = oracles::finite_difference(w, eval);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      worst = std::max(worst, oracles::rel_err(analytic[info.offset + i], numeric[i]));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("dpkd with lambda 0 reduces bit-exactly to direct DPSGD fine-tuning") {
  const Dataset data = dpmc::make_synthetic(3, 64, 6, 100, 2.0);
  const LayeredClassifier pretrained = LayeredClassifier::random({6, 8, 3}, 4, 101);
  DpSgdConfig dp;
  dp.expected_batch_size = 16;
  dp.learning_rate = 0.1;
  dp.seed = 555;
  const dpmc::PrivacyBudget total{4.0, data.default_delta()};

  const dpmc::DpkdResult run =
      dpmc::dpkd(pretrained, InitKind::kRandom, 2, data, total, {0.0, 2.0}, dp,
                 /*teacher_steps=*/4, /*distill_steps=*/6);

  // Replay the composition by hand with the same phase seeds.
  DpSgdConfig phase = dp;
  phase.noise_multiplier = run.allocation.sigma;
  LayeredClassifier teacher = pretrained;
  phase.seed = dpmc::derive_seed(dp.seed, dpmc::phase_seed::kTeacher);
  dpmc::fine_tune(teacher, data, dpmc::hard_label_loss(data), 4, phase, nullptr, "t");
  LayeredClassifier student = dpmc::init_student(
      teacher, 2,
      {InitKind::kRandom, dpmc::derive_seed(dp.seed, dpmc::phase_seed::kStudentInit)});
  phase.seed = dpmc::derive_seed(dp.seed, dpmc::phase_seed::kStudent);
  dpmc::fine_tune(student, data, dpmc::hard_label_loss(data), 6, phase, nullptr, "s");

  CHECK(bits_equal(run.teacher.flatten(), teacher.flatten()));
  CHECK(bits_equal(run.student.flatten(), student.flatten()));
}

TEST_CASE("dpkd zero-shot-pt students start from the pre-trained teacher") {
  const Dataset data = dpmc::make_synthetic(3, 64, 6, 102, 2.0);
  const LayeredClassifier pretrained = LayeredClassifier::random({6, 8, 3}, 4, 103);
  DpSgdConfig dp;
  dp.expected_batch_size = 16;
  dp.learning_rate = 0.1;
  dp.seed = 7;
  const dpmc::DpkdResult run =
      dpmc::dpkd(pretrained, InitKind::kZeroShotPt, 2, data, {4.0, data.default_delta()},
                 {1.0, 2.0}, dp, 4, /*distill_steps=*/0);
  // With zero student steps the student is the untouched initialization:
  // blocks 0 and 2 of the PRE-trained teacher, not the fine-tuned one.
  CHECK(bits_equal({run.student.blocks()[0].w1.values().begin(),
                    run.student.blocks()[0].w1.values().end()},
                   {pretrained.blocks()[0].w1.values().begin(),
                    pretrained.blocks()[0].w1.values().end()}));
  CHECK(bits_equal({run.student.blocks()[1].w1.values().begin(),
                    run.student.blocks()[1].w1.values().end()},
                   {pretrained.blocks()[2].w1.values().begin(),
                    pretrained.blocks()[2].w1.values().end()}));
  // The fine-tuned teacher has moved away from the pre-trained weights.
  CHECK_FALSE(bits_equal(run.teacher.flatten(), pretrained.flatten()));
}

TEST_CASE("dpkd reports compose within the configured budget") {
  const Dataset data = dpmc::make_synthetic(3, 128, 6, 104, 2.0);
  const LayeredClassifier pretrained = LayeredClassifier::random({6, 8, 3}, 4, 105);
  DpSgdConfig dp;
  dp.expected_batch_size = 32;
  dp.learning_rate = 0.1;
  dp.seed = 8;
  const dpmc::PrivacyBudget total{3.0, data.default_delta()};
  const dpmc::DpkdResult run = dpmc::dpkd(pretrained, InitKind::kZeroShotFt, 2,
                                          data, total, {0.5, 2.0}, dp, 6, 10);
  CHECK(run.accountant.epsilon(total.delta).epsilon <= total.epsilon);
  CHECK(run.allocation.init.epsilon == 0.0);
  // RDP shared-ledger composition is within the basic-composition fallback.
  const dpmc::PrivacyBudget basic = dpmc::compose_phases(run.allocation);
  CHECK(run.accountant.epsilon(total.delta).epsilon <= basic.epsilon + 1e-12);
}

TEST_CASE("infeasible dpkd budgets fail at calibration, before training") {
  const Dataset data = dpmc::make_synthetic(3, 64, 6, 106, 2.0);
  const LayeredClassifier pretrained = LayeredClassifier::random({6, 8, 3}, 4, 107);
  DpSgdConfig dp;
  dp.expected_batch_size = 64;
  dp.learning_rate = 0.1;
  CHECK_THROWS_AS((void)dpmc::dpkd(pretrained, InitKind::kRandom, 2, data,
                                   {1e-9, 1e-7}, {1.0, 2.0}, dp, 1000000, 1000000),
                  dpmc::CalibrationError);
}

TEST_CASE("structured pruning drops the deliberately weak block first") {
  const Dataset data = dpmc::make_synthetic(3, 64, 6, 108, 2.0);
  LayeredClassifier model = LayeredClassifier::random({6, 8, 3}, 4, 109);
  // Block 2's weights are uniformly 10x smaller than everything else.
  for (std::size_t i = 0; i < model.block(2).w1.size(); ++i) {
    model.block(2).w1[i] *= 0.1;
    model.block(2).w2[i] *= 0.1;
  }
  ImpConfig imp;
  imp.alpha_pct = 10.0;
  imp.steps_per_round = 2;
  imp.final_steps = 0;
  DpSgdConfig dp;
  dp.expected_batch_size = 16;
  dp.learning_rate = 0.01;  // small steps keep the planted ordering intact
  dp.noise_multiplier = 0.2;
  dp.seed = 9;

  std::vector<dpmc::StructuredDropEvent> events;
  RdpAccountant acct;
  const LayeredClassifier pruned = dpmc::structured_dpimp(
      model, 2, imp, dp, data, &acct,
      [&events](const dpmc::StructuredDropEvent& e) { events.push_back(e); });

  REQUIRE(events.size() == 2);
  CHECK(events[0].dropped_origin == 2);
  // Every decision matches a brute-force recomputation from the snapshot.
  std::size_t blocks = 4;
  for (const auto& e : events) {
    CHECK(e.dropped_index ==
          brute_force_drop(e.weights, e.block_of, e.w_min_size, blocks));
    --blocks;
  }
  CHECK(pruned.block_count() == 2);
  CHECK(acct.total_steps() == 2 * 2 + 0);
  // Forward pass on the pruned model is structurally sound.
  const Tensor logits = pruned.forward(data.features_of(std::vector<std::size_t>{0, 1}));
  CHECK(logits.rows() == 2);
}

TEST_CASE("structured pruning with L=0 is exactly DPSGD fine-tuning") {
  const Dataset data = dpmc::make_synthetic(3, 64, 6, 110, 2.0);
  const LayeredClassifier start = LayeredClassifier::random({6, 8, 3}, 3, 111);
  ImpConfig imp;
  imp.steps_per_round = 7;  // irrelevant: zero rounds
  imp.final_steps = 5;
  DpSgdConfig dp;
  dp.expected_batch_size = 16;
  dp.learning_rate = 0.1;
  dp.noise_multiplier = 0.7;
  dp.seed = 12;

  RdpAccountant acct;
  const LayeredClassifier pruned =
      dpmc::structured_dpimp(start, 0, imp, dp, data, &acct);
  CHECK(pruned.block_count() == 3);
  CHECK(acct.total_steps() == 5);

  LayeredClassifier direct = start;
  RdpAccountant acct2;
  dpmc::fine_tune(direct, data, dpmc::hard_label_loss(data), 5, dp, &acct2, "ft");
  CHECK(bits_equal(pruned.flatten(), direct.flatten()));
}

TEST_CASE("structured pruning rejects dropping every block") {
  const Dataset data = dpmc::make_synthetic(3, 32, 6, 112, 2.0);
  LayeredClassifier model = LayeredClassifier::random({6, 8, 3}, 2, 113);
  ImpConfig imp;
  DpSgdConfig dp;
  CHECK_THROWS_AS((void)dpmc::structured_dpimp(model, 2, imp, dp, data, nullptr),
                  dpmc::ConfigError);
}

TEST_CASE("unstructured hand case: one round at 50% keeps {-3, 2}") {
  // H=1 toy model: exactly four prunable coordinates, set to 1, -3, 0.5, 2.
  const Dataset data = dpmc::make_synthetic(2, 8, 1, 114, 1.0);
  LayeredClassifier model = LayeredClassifier::random({1, 1, 2}, 2, 115);
  model.block(0).w1[0] = 1.0;
  model.block(0).w2[0] = -3.0;
  model.block(1).w1[0] = 0.5;
  model.block(1).w2[0] = 2.0;

  ImpConfig imp;
  imp.alpha_pct = 50.0;
  imp.steps_per_round = 0;  // no fine-tuning: magnitudes stay as planted
  imp.final_steps = 0;
  DpSgdConfig dp;
  dp.expected_batch_size = 4;
  dp.learning_rate = 0.1;
  const LayeredClassifier pruned =
      dpmc::unstructured_dpimp(model, 50.0, imp, dp, data, nullptr);

  REQUIRE(pruned.mask().has_value());
  const std::vector<std::uint8_t> keep = pruned.mask()->keep;
  // Registry order: block0.W1 (1), block0.W2 (-3), block1.W1 (0.5), block1.W2 (2).
  CHECK(keep == std::vector<std::uint8_t>{0, 1, 0, 1});
  const std::vector<double> w = pruned.prunable_values();
  CHECK(w[0] == 0.0);
  CHECK(w[1] == -3.0);
  CHECK(w[2] == 0.0);
  CHECK(w[3] == 2.0);
}

TEST_CASE("unstructured pruning: 5 rounds, monotone masks, exact resets") {
  const Dataset data = dpmc::make_synthetic(3, 64, 6, 116, 2.0);
  LayeredClassifier model = LayeredClassifier::random({6, 8, 3}, 2, 117);
  const std::vector<double> original = model.flatten();

  ImpConfig imp;
  imp.alpha_pct = 10.0;
  imp.steps_per_round = 3;
  imp.final_steps = 4;
  DpSgdConfig dp;
  dp.expected_batch_size = 16;
  dp.learning_rate = 0.1;
  dp.noise_multiplier = 0.8;
  dp.seed = 13;

  struct RoundSnapshot {
    std::vector<std::uint8_t> keep;
    std::vector<double> params;
  };
  std::vector<RoundSnapshot> rounds;
  RdpAccountant acct;
  const LayeredClassifier pruned = dpmc::unstructured_dpimp(
      model, 50.0, imp, dp, data, &acct,
      [&rounds](const dpmc::UnstructuredRoundEvent& e) {
        rounds.push_back({e.mask.keep, e.model.flatten()});
      });

  REQUIRE(rounds.size() == 5);  // ceil(50 / 10)
  CHECK(acct.total_steps() == 5 * 3 + 4);

  const std::size_t prunable = pruned.prunable_count();
  // Masks are monotone: once pruned, always pruned.
  for (std::size_t r = 1; r < rounds.size(); ++r) {
    for (std::size_t i = 0; i < prunable; ++i) {
      if (!rounds[r - 1].keep[i]) CHECK(rounds[r].keep[i] == 0);
    }
  }
  // After every reset, surviving parameters bit-equal the pre-loop values.
  // Non-prunable parameters are always surviving.
  for (const auto& snap : rounds) {
    std::size_t coord = 0;
    for (const auto& info : model.registry()) {
      for (std::size_t i = 0; i < info.size; ++i, ++coord) {
        const bool kept =
            !info.prunable || snap.keep[info.prunable_offset + i] != 0;
        if (kept) {
          CHECK(snap.params[coord] == original[coord]);
        } else {
          CHECK(snap.params[coord] == 0.0);
        }
      }
    }
  }
  // Final sparsity is 50% within one coordinate of rounding.
  REQUIRE(pruned.mask().has_value());
  const double achieved = pruned.sparsity();
  CHECK(std::abs(achieved - 0.5) <= 1.0 / static_cast<double>(prunable));
  CHECK(pruned.mask()->iteration == 5);
}

TEST_CASE("unstructured pruning with sort-oracle masks on random weights") {
  const Dataset data = dpmc::make_synthetic(3, 32, 6, 118, 2.0);
  LayeredClassifier model = LayeredClassifier::random({6, 8, 3}, 2, 119);
  const std::vector<double> weights = model.prunable_values();

  ImpConfig imp;
  imp.alpha_pct = 30.0;
  imp.steps_per_round = 0;
  imp.final_steps = 0;
  DpSgdConfig dp;
  dp.expected_batch_size = 8;
  dp.learning_rate = 0.1;
  const LayeredClassifier pruned =
      dpmc::unstructured_dpimp(model, 30.0, imp, dp, data, nullptr);

  // Independent oracle: sort by (|w|, index), prune the first 30%.
  std::vector<std::size_t> idx(weights.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(weights[a]) != std::abs(weights[b])
               ? std::abs(weights[a]) < std::abs(weights[b])
               : a < b;
  });
  const std::size_t k = static_cast<std::size_t>(
      std::llround(0.30 * static_cast<double>(weights.size())));
  std::vector<std::uint8_t> expected(weights.size(), 1);
  for (std::size_t i = 0; i < k; ++i) expected[idx[i]] = 0;
  CHECK(pruned.mask()->keep == expected);
}

TEST_CASE("private pruning wrappers stay within their budgets") {
  const Dataset data = dpmc::make_synthetic(3, 128, 6, 120, 2.0);
  const LayeredClassifier model = LayeredClassifier::random({6, 8, 3}, 4, 121);
  ImpConfig imp;
  imp.alpha_pct = 25.0;
  imp.steps_per_round = 2;
  imp.final_steps = 3;
  DpSgdConfig dp;
  dp.expected_batch_size = 32;
  dp.learning_rate = 0.05;
  dp.seed = 14;
  const dpmc::PrivacyBudget budget{4.0, data.default_delta()};

  const dpmc::ImpResult structured =
      dpmc::structured_dpimp_private(model, 2, imp, dp, data, budget);
  CHECK(structured.accountant.epsilon(budget.delta).epsilon <= budget.epsilon);
  CHECK(structured.dropped_blocks.size() == 2);
  CHECK(structured.model.block_count() == 2);

  const dpmc::ImpResult unstructured =
      dpmc::unstructured_dpimp_private(model, 50.0, imp, dp, data, budget);
  CHECK(unstructured.accountant.epsilon(budget.delta).epsilon <= budget.epsilon);
  CHECK(unstructured.model.sparsity() == doctest::Approx(0.5).epsilon(0.01));
}
