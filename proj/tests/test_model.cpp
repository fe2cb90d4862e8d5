// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpmc/model.hpp"

#include <vector>

#include "doctest.h"
#include "dpmc/rng.hpp"

using dpmc::InitKind;
using dpmc::InitStrategy;
using dpmc::LayeredClassifier;
using dpmc::PruneMask;
using dpmc::Tensor;

namespace {

LayeredClassifier small_model(std::size_t blocks, std::uint64_t seed) {
  return LayeredClassifier::random({6, 8, 3}, blocks, seed);
}

Tensor random_input(std::size_t rows, std::size_t d, std::uint64_t seed) {
  Tensor x({rows, d});
  dpmc::GaussianSampler g(seed);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = g.next();
  return x;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("zero input with zero biases produces zero logits") {
  LayeredClassifier m = small_model(3, 5);
  // biases are already zero at init; zero the input too
  Tensor x({4, 6});
  const Tensor logits = m.forward(x);
  for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits[i] == 0.0);
}

TEST_CASE("forward rejects mismatched feature width") {
  LayeredClassifier m = small_model(2, 6);
  CHECK_THROWS_AS((void)m.forward(random_input(3, 5, 1)), dpmc::ShapeError);
}

TEST_CASE("masking a parameter equals explicitly zeroing it") {
  LayeredClassifier masked = small_model(3, 7);
  LayeredClassifier zeroed = masked;

  // All-false mask over block 1's W2, identity elsewhere.
  PruneMask mask;
  mask.keep.assign(masked.prunable_count(), 1);
  for (const auto& info : masked.registry()) {
    if (info.prunable && info.block == 1 &&
        info.kind == LayeredClassifier::ParamKind::kW2) {
      for (std::size_t i = 0; i < info.size; ++i) {
        mask.keep[info.prunable_offset + i] = 0;
      }
    }
  }
  masked.apply_mask(mask);
  for (std::size_t i = 0; i < zeroed.block(1).w2.size(); ++i) {
    zeroed.block(1).w2[i] = 0.0;
  }

  const Tensor x = random_input(5, 6, 8);
  CHECK(bit_equal(masked.forward(x), zeroed.forward(x)));
}

TEST_CASE("dropping zero-branch blocks is a bit-exact no-op") {
  LayeredClassifier teacher = LayeredClassifier::random({6, 8, 3}, 4, 11);
  // Blocks 1 and 3 get a zero residual branch.
  for (std::size_t b : {1u, 3u}) {
    for (std::size_t i = 0; i < teacher.block(b).w2.size(); ++i) {
      teacher.block(b).w2[i] = 0.0;
    }
    for (std::size_t i = 0; i < teacher.block(b).b2.size(); ++i) {
      teacher.block(b).b2[i] = 0.0;
    }
  }
  LayeredClassifier student = teacher;
  student.drop_block(3);
  student.drop_block(1);
  CHECK(student.block_count() == 2);
  CHECK(student.block_origins() == std::vector<int>{0, 2});

  const Tensor x = random_input(7, 6, 12);
  CHECK(bit_equal(teacher.forward(x), student.forward(x)));
}

TEST_CASE("dropping any number of blocks keeps the forward pass valid") {
  LayeredClassifier m = small_model(5, 13);
  const Tensor x = random_input(2, 6, 14);
  for (int round = 0; round < 5; ++round) {
    m.drop_block(0);
    const Tensor logits = m.forward(x);
    CHECK(logits.rows() == 2);
    CHECK(logits.cols() == 3);
  }
  CHECK(m.block_count() == 0);
}

TEST_CASE("zero-shot init copies even-index blocks bit-identically") {
  LayeredClassifier teacher = LayeredClassifier::random({6, 8, 3}, 12, 21);
  InitStrategy strategy{InitKind::kZeroShotPt, 0, &teacher};
  const LayeredClassifier student = dpmc::init_student(teacher, 6, strategy);

  CHECK(student.block_count() == 6);
  const std::vector<std::size_t> expected{0, 2, 4, 6, 8, 10};
  CHECK(dpmc::zero_shot_block_indices(12, 6) == expected);
  for (std::size_t i = 0; i < 6; ++i) {
    const dpmc::Block& src = teacher.blocks()[expected[i]];
    const dpmc::Block& dst = student.blocks()[i];
    CHECK(bit_equal(src.w1, dst.w1));
    CHECK(bit_equal(src.b1, dst.b1));
    CHECK(bit_equal(src.w2, dst.w2));
    CHECK(bit_equal(src.b2, dst.b2));
  }
  CHECK(bit_equal(teacher.input_proj(), student.input_proj()));
  CHECK(bit_equal(teacher.head(), student.head()));
}

TEST_CASE("random init is deterministic per seed") {
  LayeredClassifier teacher = small_model(4, 31);
  InitStrategy strategy{InitKind::kRandom, 99, nullptr};
  const LayeredClassifier a = dpmc::init_student(teacher, 2, strategy);
  const LayeredClassifier b = dpmc::init_student(teacher, 2, strategy);
  CHECK(bit_equal(a.input_proj(), b.input_proj()));
  CHECK(bit_equal(a.head(), b.head()));
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(bit_equal(a.blocks()[i].w1, b.blocks()[i].w1));
    CHECK(bit_equal(a.blocks()[i].w2, b.blocks()[i].w2));
  }
}

TEST_CASE("init_student rejects depths beyond the teacher") {
  LayeredClassifier teacher = small_model(4, 41);
  InitStrategy strategy{InitKind::kRandom, 1, nullptr};
  CHECK_THROWS_AS((void)dpmc::init_student(teacher, 5, strategy), dpmc::ConfigError);
  InitStrategy zs{InitKind::kZeroShotPt, 0, &teacher};
  // Even-index convention needs teacher depth >= 2*keep - 1.
  CHECK_THROWS_AS((void)dpmc::init_student(teacher, 4, zs), dpmc::ConfigError);
}

TEST_CASE("all-true mask leaves the model unchanged") {
  LayeredClassifier m = small_model(2, 51);
  const LayeredClassifier before = m;
  PruneMask mask;
  mask.keep.assign(m.prunable_count(), 1);
  m.apply_mask(mask);
  CHECK(m.sparsity() == 0.0);
  const Tensor x = random_input(3, 6, 52);
  CHECK(bit_equal(before.forward(x), m.forward(x)));
}

TEST_CASE("all-false mask zeroes every prunable weight") {
  LayeredClassifier m = small_model(2, 61);
  PruneMask mask;
  mask.keep.assign(m.prunable_count(), 0);
  m.apply_mask(mask);
  CHECK(m.sparsity() == 1.0);
  for (const double w : m.prunable_values()) CHECK(w == 0.0);
  // Biases, projection and head are untouched by the mask.
  double nonzero = 0.0;
  for (std::size_t i = 0; i < m.input_proj().size(); ++i) {
    nonzero += std::abs(m.input_proj()[i]);
  }
  CHECK(nonzero > 0.0);
}

TEST_CASE("mask of the wrong size is rejected") {
  LayeredClassifier m = small_model(2, 71);
  PruneMask mask;
  mask.keep.assign(m.prunable_count() + 1, 1);
  CHECK_THROWS_AS(m.apply_mask(mask), dpmc::MaskError);
}

TEST_CASE("sparsity is derived from the mask alone") {
  LayeredClassifier m = small_model(2, 81);
  PruneMask mask;
  mask.keep.assign(m.prunable_count(), 1);
  dpmc::Rng rng(82);
  std::size_t zeros = 0;
  for (auto& k : mask.keep) {
    if (rng.uniform() < 0.25) {
      k = 0;
      ++zeros;
    }
  }
  m.apply_mask(mask);
  CHECK(m.sparsity() ==
        static_cast<double>(zeros) / static_cast<double>(m.prunable_count()));
  // Overwriting surviving weights does not change the reported sparsity.
  m.block(0).b1[0] = 123.0;
  CHECK(m.sparsity() ==
        static_cast<double>(zeros) / static_cast<double>(m.prunable_count()));
}

TEST_CASE("checkpoint round-trip is bit-exact including the mask") {
  LayeredClassifier m = small_model(3, 91);
  PruneMask mask;
  mask.keep.assign(m.prunable_count(), 1);
  dpmc::Rng rng(92);
  for (auto& k : mask.keep) k = rng.uniform() < 0.5 ? 0 : 1;
  mask.target_sparsity_pct = 50.0;
  mask.iteration = 3;
  m.apply_mask(mask);

  const auto doc = m.to_checkpoint_json();
  const std::string text = doc.dump();
  const LayeredClassifier restored =
      LayeredClassifier::from_checkpoint_json(nlohmann::json::parse(text));

  CHECK(restored.block_count() == m.block_count());
  CHECK(restored.mask().has_value());
  CHECK(restored.mask()->iteration == 3);
  CHECK(restored.mask()->target_sparsity_pct == 50.0);
  CHECK(restored.mask()->keep == m.mask()->keep);
  CHECK(bit_equal(restored.input_proj(), m.input_proj()));
  CHECK(bit_equal(restored.head(), m.head()));
  for (std::size_t b = 0; b < m.block_count(); ++b) {
    CHECK(bit_equal(restored.blocks()[b].w1, m.blocks()[b].w1));
    CHECK(bit_equal(restored.blocks()[b].b1, m.blocks()[b].b1));
    CHECK(bit_equal(restored.blocks()[b].w2, m.blocks()[b].w2));
    CHECK(bit_equal(restored.blocks()[b].b2, m.blocks()[b].b2));
  }
  // And the serialized form reloads to the same document byte for byte.
  CHECK(restored.to_checkpoint_json().dump() == text);
}

TEST_CASE("flatten/unflatten round-trips the registry order") {
  LayeredClassifier m = small_model(2, 101);
  const std::vector<double> flat = m.flatten();
  CHECK(flat.size() == m.param_count());
  LayeredClassifier other = LayeredClassifier::zeros(m.dims(), 2);
  other.unflatten(flat);
  const Tensor x = random_input(3, 6, 102);
  CHECK(bit_equal(m.forward(x), other.forward(x)));
}
