// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// The layered classifier: an input projection, a stack of width-preserving
// residual feed-forward blocks (so any subset of blocks still composes), and
// a linear head. Parameters are addressed through a registry that fixes a
// canonical flat coordinate order; block W1/W2 matrices are prunable,
// biases, projection and head are not.

#pragma once

#include <bit>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dpmc/error.hpp"
#include "dpmc/rng.hpp"
#include "dpmc/tensor.hpp"

namespace dpmc {

/// Boolean keep-pattern over the prunable coordinates of one model.
/// false = pruned (weight pinned to zero). Monotone across pruning rounds.
struct PruneMask {
  std::vector<std::uint8_t> keep;
  double target_sparsity_pct = 0.0;
  int iteration = 0;

  double sparsity() const {
    if (keep.empty()) return 0.0;
    std::size_t zeros = 0;
    for (const auto k : keep) zeros += k ? 0 : 1;
    return static_cast<double>(zeros) / static_cast<double>(keep.size());
  }
};

/// Residual feed-forward unit: x + gelu(layernorm(x) W1 + b1) W2 + b2.
/// Input and output width are both H, so blocks can be dropped freely, and
/// a block whose residual branch is zero (W2 = 0, b2 = 0) is an exact
/// identity: dropping it cannot change the forward pass by even one bit.
struct Block {
  Tensor w1;  // [H x H]
  Tensor b1;  // [H]
  Tensor w2;  // [H x H]
  Tensor b2;  // [H]
};

enum class InitKind { kRandom, kZeroShotPt, kZeroShotFt };

inline const char* init_kind_name(InitKind k) {
  switch (k) {
    case InitKind::kRandom: return "random";
    case InitKind::kZeroShotPt: return "zero-shot-pt";
    case InitKind::kZeroShotFt: return "zero-shot-ft";
  }
  return "?";
}

/// How to initialize a student model. Zero-shot variants copy whole blocks
/// verbatim from the given checkpoint (pre-trained vs privately fine-tuned
/// teacher respectively); Random draws fresh weights from `seed`.
struct InitStrategy {
  InitKind kind = InitKind::kRandom;
  std::uint64_t seed = 0;
  const class LayeredClassifier* checkpoint = nullptr;
};

/// Teacher-layer indices copied into a student of `keep` blocks: the even
/// indices 0, 2, 4, ... This mirrors the usual distillation convention of
/// keeping every other layer; it is pinned here so tests can rely on it.
inline std::vector<std::size_t> zero_shot_block_indices(std::size_t teacher_blocks,
                                                        std::size_t keep) {
  if (keep > teacher_blocks) {
    throw ConfigError("zero-shot init: student depth exceeds teacher depth");
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t src = 2 * i;
    if (src >= teacher_blocks) {
      throw ConfigError(
          "zero-shot init: even-index convention needs teacher depth >= " +
          std::to_string(2 * keep - 1) + ", got " + std::to_string(teacher_blocks));
    }
    idx.push_back(src);
  }
  return idx;
}

namespace detail {

inline std::string encode_f64_hex(std::span<const double> values) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(values.size() * 16);
  for (const double v : values) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int shift = 60; shift >= 0; shift -= 4) {
      out.push_back(digits[(bits >> shift) & 0xF]);
    }
  }
  return out;
}

inline std::vector<double> decode_f64_hex(const std::string& hex) {
  if (hex.size() % 16 != 0) {
    throw DataError("checkpoint: hex float array has invalid length");
  }
  std::vector<double> out(hex.size() / 16);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (std::size_t c = 0; c < 16; ++c) {
      const char ch = hex[i * 16 + c];
      std::uint64_t nibble;
      if (ch >= '0' && ch <= '9') {
        nibble = static_cast<std::uint64_t>(ch - '0');
      } else if (ch >= 'a' && ch <= 'f') {
        nibble = static_cast<std::uint64_t>(ch - 'a' + 10);
      } else {
        throw DataError("checkpoint: invalid hex digit in float array");
      }
      bits = (bits << 4) | nibble;
    }
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace detail

class LayeredClassifier {
 public:
  struct Dims {
    std::size_t input_dim = 0;
    std::size_t hidden = 0;
    std::size_t classes = 0;
  };

  enum class ParamKind { kInputProj, kW1, kB1, kW2, kB2, kHead };

  struct ParamInfo {
    std::string name;
    ParamKind kind;
    int block;      // -1 for input_proj / head
    bool prunable;  // block W1/W2 only
    std::size_t offset;           // into the flat parameter vector
    std::size_t size;
    std::size_t prunable_offset;  // into the flat prunable vector, or npos
  };
  static constexpr std::size_t kNotPrunable = static_cast<std::size_t>(-1);

  LayeredClassifier() = default;

  /// Fresh model; weights ~ N(0, 1/fan_in), biases zero, seeded draw order
  /// fixed by the registry.
  static LayeredClassifier random(Dims dims, std::size_t blocks,
                                  std::uint64_t seed) {
    LayeredClassifier m;
    m.dims_ = dims;
    GaussianSampler g(seed);
    m.input_proj_ = random_matrix(g, dims.input_dim, dims.hidden);
    for (std::size_t b = 0; b < blocks; ++b) {
      Block blk;
      blk.w1 = random_matrix(g, dims.hidden, dims.hidden);
      blk.b1 = Tensor({dims.hidden});
      blk.w2 = random_matrix(g, dims.hidden, dims.hidden);
      blk.b2 = Tensor({dims.hidden});
      m.blocks_.push_back(std::move(blk));
      m.origins_.push_back(static_cast<int>(b));
    }
    m.head_ = random_matrix(g, dims.hidden, dims.classes);
    m.refresh_registry();
    return m;
  }

  /// All-zero parameters; used as a shell for checkpoint loads and copies.
  static LayeredClassifier zeros(Dims dims, std::size_t blocks) {
    LayeredClassifier m;
    m.dims_ = dims;
    m.input_proj_ = Tensor({dims.input_dim, dims.hidden});
    for (std::size_t b = 0; b < blocks; ++b) {
      Block blk;
      blk.w1 = Tensor({dims.hidden, dims.hidden});
      blk.b1 = Tensor({dims.hidden});
      blk.w2 = Tensor({dims.hidden, dims.hidden});
      blk.b2 = Tensor({dims.hidden});
      m.blocks_.push_back(std::move(blk));
      m.origins_.push_back(static_cast<int>(b));
    }
    m.head_ = Tensor({dims.hidden, dims.classes});
    m.refresh_registry();
    return m;
  }

  const Dims& dims() const { return dims_; }
  std::size_t block_count() const { return blocks_.size(); }
  const std::vector<Block>& blocks() const { return blocks_; }
  Block& block(std::size_t i) { return blocks_[i]; }
  Tensor& input_proj() { return input_proj_; }
  const Tensor& input_proj() const { return input_proj_; }
  Tensor& head() { return head_; }
  const Tensor& head() const { return head_; }
  const std::vector<int>& block_origins() const { return origins_; }

  const std::vector<ParamInfo>& registry() const { return registry_; }
  std::size_t param_count() const { return param_count_; }
  std::size_t prunable_count() const { return prunable_count_; }

  const Tensor& tensor_of(const ParamInfo& info) const {
    return const_cast<LayeredClassifier*>(this)->tensor_of_mut(info);
  }

  /// Tape forward pass over a [batch x input_dim] matrix. Leaves for every
  /// parameter are registered in registry order; prunable parameters with an
  /// active mask go through mask_mul so their dropped coordinates neither
  /// contribute forward nor receive gradient.
  struct TapeBinding {
    std::vector<Var> params;
    Var logits;
  };

  TapeBinding forward_tape(Tape& tape, const Tensor& x,
                           bool params_require_grad = true) const {
    if (x.shape().size() != 2 || x.cols() != dims_.input_dim) {
      throw ShapeError("forward: input " + x.shape_str() + " does not match input_dim " +
                       std::to_string(dims_.input_dim));
    }
    TapeBinding binding;
    binding.params.reserve(registry_.size());
    std::vector<Var> effective;
    effective.reserve(registry_.size());
    for (const ParamInfo& info : registry_) {
      const Var leaf = tape.leaf(tensor_of(info), params_require_grad);
      binding.params.push_back(leaf);
      Var eff = leaf;
      if (mask_ && info.prunable) {
        std::vector<std::uint8_t> keep(
            mask_->keep.begin() + static_cast<std::ptrdiff_t>(info.prunable_offset),
            mask_->keep.begin() +
                static_cast<std::ptrdiff_t>(info.prunable_offset + info.size));
        eff = tape.mask_mul(leaf, std::move(keep));
      }
      effective.push_back(eff);
    }
    Var x_var = tape.leaf(x, false);
    Var h = tape.matmul(x_var, effective[0]);  // input projection
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::size_t base = 1 + 4 * b;
      Var n = tape.layer_norm(h);
      Var u = tape.add_row(tape.matmul(n, effective[base + 0]), effective[base + 1]);
      Var a = tape.gelu(u);
      Var v = tape.add_row(tape.matmul(a, effective[base + 2]), effective[base + 3]);
      h = tape.add(h, v);
    }
    binding.logits = tape.matmul(h, effective.back());
    return binding;
  }

  /// Value-only forward (scratch tape).
  Tensor forward(const Tensor& x) const {
    Tape tape;
    const TapeBinding b = forward_tape(tape, x, /*params_require_grad=*/false);
    return tape.value(b.logits);
  }

  // ---- flat parameter vector ----

  std::vector<double> flatten() const {
    std::vector<double> flat(param_count_);
    for (const ParamInfo& info : registry_) {
      const Tensor& t = tensor_of(info);
      std::copy(t.data(), t.data() + t.size(), flat.begin() + static_cast<std::ptrdiff_t>(info.offset));
    }
    return flat;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != param_count_) {
      throw ShapeError("unflatten: expected " + std::to_string(param_count_) +
                       " coordinates, got " + std::to_string(flat.size()));
    }
    for (const ParamInfo& info : registry_) {
      Tensor& t = tensor_of_mut(info);
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(info.offset),
                flat.begin() + static_cast<std::ptrdiff_t>(info.offset + info.size),
                t.data());
    }
  }

  /// Copies tape gradients of a forward binding into registry order.
  std::vector<double> collect_grad(Tape& tape, const TapeBinding& binding) const {
    std::vector<double> flat(param_count_, 0.0);
    for (std::size_t p = 0; p < registry_.size(); ++p) {
      const ParamInfo& info = registry_[p];
      const Tensor& g = tape.grad(binding.params[p]);
      std::copy(g.data(), g.data() + g.size(),
                flat.begin() + static_cast<std::ptrdiff_t>(info.offset));
    }
    return flat;
  }

  /// Parameter update p -= delta, skipping masked-out coordinates so pruned
  /// weights stay exactly 0.0 through any number of optimizer steps.
  void apply_update(std::span<const double> delta) {
    if (delta.size() != param_count_) {
      throw ShapeError("apply_update: gradient length mismatch");
    }
    for (const ParamInfo& info : registry_) {
      Tensor& t = tensor_of_mut(info);
      for (std::size_t i = 0; i < info.size; ++i) {
        if (mask_ && info.prunable && !mask_->keep[info.prunable_offset + i]) {
          continue;
        }
        const double next = t[i] - delta[info.offset + i];
        if (!std::isfinite(next)) {
          throw NonFiniteError("apply_update: parameter became non-finite");
        }
        t[i] = next;
      }
    }
  }

  // ---- masking ----

  /// Installs `mask` over the prunable coordinates: dropped weights are set
  /// to 0 now and held there by apply_update / forward_tape.
  void apply_mask(PruneMask mask) {
    if (mask.keep.size() != prunable_count_) {
      throw MaskError("apply_mask: mask covers " + std::to_string(mask.keep.size()) +
                      " coordinates, model has " + std::to_string(prunable_count_) +
                      " prunable");
    }
    mask_ = std::move(mask);
    for (const ParamInfo& info : registry_) {
      if (!info.prunable) continue;
      Tensor& t = tensor_of_mut(info);
      for (std::size_t i = 0; i < info.size; ++i) {
        if (!mask_->keep[info.prunable_offset + i]) t[i] = 0.0;
      }
    }
  }

  void clear_mask() { mask_.reset(); }
  const std::optional<PruneMask>& mask() const { return mask_; }

  /// Fraction of prunable weights currently pruned; derived from the mask
  /// alone (an unmasked model reports 0).
  double sparsity() const { return mask_ ? mask_->sparsity() : 0.0; }

  /// Current prunable weight values in flat prunable order.
  std::vector<double> prunable_values() const {
    std::vector<double> out(prunable_count_);
    for (const ParamInfo& info : registry_) {
      if (!info.prunable) continue;
      const Tensor& t = tensor_of(info);
      std::copy(t.data(), t.data() + t.size(),
                out.begin() + static_cast<std::ptrdiff_t>(info.prunable_offset));
    }
    return out;
  }

  /// Block index owning each flat prunable coordinate.
  std::vector<int> prunable_block_of() const {
    std::vector<int> out(prunable_count_);
    for (const ParamInfo& info : registry_) {
      if (!info.prunable) continue;
      std::fill(out.begin() + static_cast<std::ptrdiff_t>(info.prunable_offset),
                out.begin() +
                    static_cast<std::ptrdiff_t>(info.prunable_offset + info.size),
                info.block);
    }
    return out;
  }

  // ---- structure ----

  /// Removes block `index`; remaining blocks keep their relative order.
  /// Invalid with an active mask (the prunable layout would shift).
  void drop_block(std::size_t index) {
    if (index >= blocks_.size()) {
      throw ConfigError("drop_block: index out of range");
    }
    if (mask_) {
      throw MaskError("drop_block: cannot drop blocks while a prune mask is active");
    }
    blocks_.erase(blocks_.begin() + static_cast<std::ptrdiff_t>(index));
    origins_.erase(origins_.begin() + static_cast<std::ptrdiff_t>(index));
    refresh_registry();
  }

  // ---- checkpoints ----

  nlohmann::ordered_json to_checkpoint_json() const {
    nlohmann::ordered_json doc;
    doc["format_version"] = 1;
    doc["dims"] = {{"input_dim", dims_.input_dim},
                   {"hidden", dims_.hidden},
                   {"classes", dims_.classes}};
    doc["block_count"] = blocks_.size();
    nlohmann::ordered_json params;
    for (const ParamInfo& info : registry_) {
      params[info.name] = detail::encode_f64_hex(tensor_of(info).values());
    }
    doc["params"] = std::move(params);
    if (mask_) {
      nlohmann::ordered_json mask;
      mask["target_sparsity"] = mask_->target_sparsity_pct;
      mask["iteration"] = mask_->iteration;
      nlohmann::ordered_json bitmaps;
      for (const ParamInfo& info : registry_) {
        if (!info.prunable) continue;
        std::string bits(info.size, '0');
        for (std::size_t i = 0; i < info.size; ++i) {
          bits[i] = mask_->keep[info.prunable_offset + i] ? '1' : '0';
        }
        bitmaps[info.name] = std::move(bits);
      }
      mask["bitmaps"] = std::move(bitmaps);
      doc["mask"] = std::move(mask);
    }
    return doc;
  }

  static LayeredClassifier from_checkpoint_json(const nlohmann::json& doc) {
    if (!doc.contains("format_version") || doc["format_version"].get<int>() != 1) {
      throw DataError("checkpoint: unsupported format_version");
    }
    Dims dims;
    dims.input_dim = doc["dims"]["input_dim"].get<std::size_t>();
    dims.hidden = doc["dims"]["hidden"].get<std::size_t>();
    dims.classes = doc["dims"]["classes"].get<std::size_t>();
    LayeredClassifier m = zeros(dims, doc["block_count"].get<std::size_t>());
    for (const ParamInfo& info : m.registry_) {
      const auto it = doc["params"].find(info.name);
      if (it == doc["params"].end()) {
        throw DataError("checkpoint: missing parameter " + info.name);
      }
      const std::vector<double> values =
          detail::decode_f64_hex(it->get<std::string>());
      Tensor& t = m.tensor_of_mut(info);
      if (values.size() != t.size()) {
        throw DataError("checkpoint: parameter " + info.name + " has wrong length");
      }
      std::copy(values.begin(), values.end(), t.data());
    }
    if (doc.contains("mask")) {
      PruneMask mask;
      mask.target_sparsity_pct = doc["mask"]["target_sparsity"].get<double>();
      mask.iteration = doc["mask"]["iteration"].get<int>();
      mask.keep.assign(m.prunable_count_, 1);
      for (const ParamInfo& info : m.registry_) {
        if (!info.prunable) continue;
        const std::string bits = doc["mask"]["bitmaps"][info.name].get<std::string>();
        if (bits.size() != info.size) {
          throw DataError("checkpoint: mask bitmap length mismatch for " + info.name);
        }
        for (std::size_t i = 0; i < info.size; ++i) {
          mask.keep[info.prunable_offset + i] = bits[i] == '1' ? 1 : 0;
        }
      }
      m.apply_mask(std::move(mask));
    }
    return m;
  }

 private:
  static Tensor random_matrix(GaussianSampler& g, std::size_t rows,
                              std::size_t cols) {
    Tensor t({rows, cols});
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * g.next();
    return t;
  }

  Tensor& tensor_of_mut(const ParamInfo& info) {
    switch (info.kind) {
      case ParamKind::kInputProj: return input_proj_;
      case ParamKind::kW1: return blocks_[static_cast<std::size_t>(info.block)].w1;
      case ParamKind::kB1: return blocks_[static_cast<std::size_t>(info.block)].b1;
      case ParamKind::kW2: return blocks_[static_cast<std::size_t>(info.block)].w2;
      case ParamKind::kB2: return blocks_[static_cast<std::size_t>(info.block)].b2;
      case ParamKind::kHead: return head_;
    }
    throw Error("unreachable param kind");
  }

  void refresh_registry() {
    registry_.clear();
    std::size_t offset = 0;
    std::size_t prunable_offset = 0;
    auto push = [&](std::string name, ParamKind kind, int block, bool prunable,
                    std::size_t size) {
      registry_.push_back({std::move(name), kind, block, prunable, offset, size,
                           prunable ? prunable_offset : kNotPrunable});
      offset += size;
      if (prunable) prunable_offset += size;
    };
    push("input_proj", ParamKind::kInputProj, -1, false,
         dims_.input_dim * dims_.hidden);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string prefix = "block" + std::to_string(b);
      const int bi = static_cast<int>(b);
      push(prefix + ".W1", ParamKind::kW1, bi, true, dims_.hidden * dims_.hidden);
      push(prefix + ".b1", ParamKind::kB1, bi, false, dims_.hidden);
      push(prefix + ".W2", ParamKind::kW2, bi, true, dims_.hidden * dims_.hidden);
      push(prefix + ".b2", ParamKind::kB2, bi, false, dims_.hidden);
    }
    push("head", ParamKind::kHead, -1, false, dims_.hidden * dims_.classes);
    param_count_ = offset;
    prunable_count_ = prunable_offset;
  }

  Dims dims_;
  Tensor input_proj_;
  std::vector<Block> blocks_;
  Tensor head_;
  std::vector<int> origins_;
  std::optional<PruneMask> mask_;
  std::vector<ParamInfo> registry_;
  std::size_t param_count_ = 0;
  std::size_t prunable_count_ = 0;
};

/// Builds a student of `blocks_keep` blocks from a teacher per the chosen
/// strategy. Zero-shot strategies copy the even-index blocks plus the input
/// projection and head verbatim from the strategy's checkpoint.
inline LayeredClassifier init_student(const LayeredClassifier& teacher,
                                      std::size_t blocks_keep,
                                      const InitStrategy& strategy) {
  if (blocks_keep > teacher.block_count()) {
    throw ConfigError("init_student: requested depth exceeds teacher depth");
  }
  if (strategy.kind == InitKind::kRandom) {
    return LayeredClassifier::random(teacher.dims(), blocks_keep, strategy.seed);
  }
  const LayeredClassifier& source =
      strategy.checkpoint ? *strategy.checkpoint : teacher;
  const std::vector<std::size_t> indices =
      zero_shot_block_indices(source.block_count(), blocks_keep);
  LayeredClassifier student = LayeredClassifier::zeros(source.dims(), blocks_keep);
  student.input_proj() = source.input_proj();
  student.head() = source.head();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    student.block(i) = source.blocks()[indices[i]];
  }
  return student;
}

}  // namespace dpmc
