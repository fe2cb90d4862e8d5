// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// Renyi differential privacy accounting for the Poisson-subsampled Gaussian
// mechanism, plus (epsilon, delta) conversion and noise calibration.
//
// Formula sources, kept next to the code that implements them:
//  - Sampled Gaussian mechanism RDP upper bound: Mironov, Talwar, Zhang,
//    "Renyi Differential Privacy of the Sampled Gaussian Mechanism" (2019).
//    Integer orders use the closed binomial sum (their Sec. 3.3); fractional
//    orders use the two-sided erfc series from the same paper.
//  - RDP -> (epsilon, delta): Balle, Barthe, Gaboardi, Hsu, Sato, "Hypothesis
//    Testing Interpretations and Renyi Differential Privacy" (2020) form
//      eps = rdp + log1p(-1/a) - (log(delta) + log(a)) / (a - 1),
//    minimized over the order grid.
//  - Plain Gaussian mechanism (q = 1) RDP: alpha / (2 sigma^2), Mironov,
//    "Renyi Differential Privacy" (2017), Table II.
//
// This accountant is looser than numerical composition accountants; reports
// carry the variant tag "rdp-subsampled-gaussian-v1" so downstream readers
// can tell which guarantee they are looking at.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dpmc/error.hpp"

namespace dpmc {

struct PrivacyBudget {
  double epsilon = 0.0;
  double delta = 0.0;

  /// Target budgets must be strictly positive in epsilon and have a proper
  /// delta; phase spends may legitimately be (0, 0).
  void validate_target() const {
    if (!(epsilon > 0.0)) throw ConfigError("privacy budget: epsilon must be > 0");
    if (!(delta > 0.0 && delta < 1.0)) {
      throw ConfigError("privacy budget: delta must lie in (0, 1)");
    }
  }
};

/// Convention delta = 1 / (10 N) for a dataset of N examples.
inline double default_delta(std::size_t n) {
  return 1.0 / (10.0 * static_cast<double>(n));
}

/// Order grid: {1.25, 1.5, 1.75, 2, 2.25, 2.5, 3, 3.5, 4, 4.5} plus all
/// integers 5..256. Covers the small-q regime where low orders win and the
/// large-step regime where high orders do.
inline std::vector<double> default_rdp_orders() {
  std::vector<double> orders{1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5};
  for (int a = 5; a <= 256; ++a) orders.push_back(static_cast<double>(a));
  return orders;
}

namespace detail {

inline double log_add(double la, double lb) {
  if (la == -std::numeric_limits<double>::infinity()) return lb;
  if (lb == -std::numeric_limits<double>::infinity()) return la;
  return std::max(la, lb) + std::log1p(std::exp(-std::abs(la - lb)));
}

inline double log_sub(double la, double lb) {
  if (lb == -std::numeric_limits<double>::infinity()) return la;
  if (la <= lb) return -std::numeric_limits<double>::infinity();
  return la + std::log1p(-std::exp(lb - la));
}

/// log(erfc(x)) with the Laurent tail expansion once erfc underflows.
inline double log_erfc(double x) {
  const double r = std::erfc(x);
  if (r > 0.0) return std::log(r);
  // erfc(x) ~ exp(-x^2 - .5/x^2 + .625/x^4) / (x sqrt(pi)) for large x.
  const double x2 = x * x;
  return -0.5 * std::log(M_PI) - std::log(x) - x2 - 0.5 / x2 +
         0.625 / (x2 * x2) - 37.0 / 24.0 / (x2 * x2 * x2) +
         353.0 / 64.0 / (x2 * x2 * x2 * x2);
}

/// log C(n, j) for integer arguments via lgamma.
inline double log_binom(std::size_t n, std::size_t j) {
  return std::lgamma(static_cast<double>(n) + 1.0) -
         std::lgamma(static_cast<double>(j) + 1.0) -
         std::lgamma(static_cast<double>(n - j) + 1.0);
}

/// One-step log A_alpha for integer alpha >= 2:
///   A = sum_{j=0..a} C(a,j) (1-q)^(a-j) q^j exp((j^2 - j) / (2 sigma^2)).
inline double log_a_int(double q, double sigma, std::size_t alpha) {
  const double lq = std::log(q);
  const double l1q = std::log1p(-q);
  double acc = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j <= alpha; ++j) {
    const double dj = static_cast<double>(j);
    const double term = log_binom(alpha, j) + dj * lq +
                        static_cast<double>(alpha - j) * l1q +
                        (dj * dj - dj) / (2.0 * sigma * sigma);
    acc = log_add(acc, term);
  }
  return acc;
}

/// One-step log A_alpha for fractional alpha > 1 via the two-part erfc
/// series. Generalized binomial coefficients come from the recurrence
/// b_{i+1} = b_i (alpha - i) / (i + 1) and alternate in sign once i > alpha.
inline double log_a_frac(double q, double sigma, double alpha) {
  const double lq = std::log(q);
  const double l1q = std::log1p(-q);
  const double s2 = sigma * sigma;
  const double z0 = s2 * std::log(1.0 / q - 1.0) + 0.5;
  double log_a0 = -std::numeric_limits<double>::infinity();
  double log_a1 = -std::numeric_limits<double>::infinity();
  double coef = 1.0;
  for (int i = 0; i < 4096; ++i) {
    const double di = static_cast<double>(i);
    const double dj = alpha - di;
    const double log_coef = std::log(std::abs(coef));
    const double log_t0 = log_coef + di * lq + dj * l1q;
    const double log_t1 = log_coef + dj * lq + di * l1q;
    const double log_e0 =
        std::log(0.5) + log_erfc((di - z0) / (std::sqrt(2.0) * sigma));
    const double log_e1 =
        std::log(0.5) + log_erfc((z0 - dj) / (std::sqrt(2.0) * sigma));
    const double log_s0 = log_t0 + (di * di - di) / (2.0 * s2) + log_e0;
    const double log_s1 = log_t1 + (dj * dj - dj) / (2.0 * s2) + log_e1;
    if (coef >= 0.0) {
      log_a0 = log_add(log_a0, log_s0);
      log_a1 = log_add(log_a1, log_s1);
    } else {
      log_a0 = log_sub(log_a0, log_s0);
      log_a1 = log_sub(log_a1, log_s1);
    }
    if (std::max(log_s0, log_s1) < -40.0) break;
    coef *= (alpha - di) / (di + 1.0);
  }
  return log_add(log_a0, log_a1);
}

}  // namespace detail

/// Per-order RDP of one step of the Poisson-subsampled Gaussian mechanism
/// with sampling rate q and noise multiplier sigma (sensitivity 1).
inline double rdp_subsampled_gaussian_step(double q, double sigma, double order) {
  if (!(order > 1.0)) throw ConfigError("rdp: orders must be > 1");
  if (q < 0.0 || q > 1.0) throw ConfigError("rdp: sampling rate must be in [0, 1]");
  if (sigma < 0.0) throw ConfigError("rdp: sigma must be >= 0");
  if (q == 0.0) return 0.0;
  if (sigma == 0.0) return std::numeric_limits<double>::infinity();
  if (q == 1.0) return order / (2.0 * sigma * sigma);  // plain Gaussian
  double value;
  const double rounded = std::nearbyint(order);
  if (rounded == order) {
    value = detail::log_a_int(q, sigma, static_cast<std::size_t>(order)) /
            (order - 1.0);
  } else {
    value = detail::log_a_frac(q, sigma, order) / (order - 1.0);
  }
  return std::max(value, 0.0);
}

/// Per-order RDP of `steps` compositions (RDP adds across steps).
inline std::vector<double> rdp_subsampled_gaussian(
    double q, double sigma, std::uint64_t steps, std::span<const double> orders) {
  std::vector<double> out(orders.size(), 0.0);
  if (steps == 0) return out;
  for (std::size_t i = 0; i < orders.size(); ++i) {
    out[i] = static_cast<double>(steps) *
             rdp_subsampled_gaussian_step(q, sigma, orders[i]);
  }
  return out;
}

struct EpsilonAtOrder {
  double epsilon = 0.0;
  double order = 0.0;
};

/// Minimum over orders of the RDP -> (epsilon, delta) conversion; also
/// reports which order attained the minimum. All-zero RDP converts to
/// epsilon = 0 (nothing was spent).
inline EpsilonAtOrder rdp_to_epsilon(std::span<const double> orders,
                                     std::span<const double> rdp, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) {
    throw ConfigError("rdp_to_epsilon: delta must lie in (0, 1)");
  }
  if (orders.size() != rdp.size()) {
    throw ConfigError("rdp_to_epsilon: orders/rdp size mismatch");
  }
  bool any_positive = false;
  for (double r : rdp) any_positive = any_positive || r > 0.0;
  if (!any_positive) return {0.0, 0.0};

  EpsilonAtOrder best{std::numeric_limits<double>::infinity(), 0.0};
  for (std::size_t i = 0; i < orders.size(); ++i) {
    const double a = orders[i];
    if (std::isinf(rdp[i])) continue;
    const double eps = std::max(
        rdp[i] + std::log1p(-1.0 / a) - (std::log(delta) + std::log(a)) / (a - 1.0),
        0.0);
    if (eps < best.epsilon) best = {eps, a};
  }
  return best;
}

/// Ledger-backed accountant. Accumulated RDP is always derived from the
/// ledger records, so charging a+b steps in one call or two produces
/// bit-identical state.
class RdpAccountant {
 public:
  struct PhaseRecord {
    std::string name;
    double q = 0.0;
    double sigma = 0.0;
    std::uint64_t steps = 0;
  };

  explicit RdpAccountant(std::vector<double> orders = default_rdp_orders())
      : orders_(std::move(orders)) {}

  void set_hard_cap(PrivacyBudget cap) {
    cap.validate_target();
    hard_cap_ = cap;
  }

  /// Records `steps` mechanism invocations. With a hard cap configured,
  /// throws BudgetExhaustedError (without recording) if the new total would
  /// exceed the cap.
  void charge(std::string_view phase, double q, double sigma, std::uint64_t steps) {
    if (steps == 0) return;
    if (hard_cap_) {
      std::vector<double> candidate = accumulated_rdp();
      const std::vector<double> inc = step_rdp(q, sigma);
      for (std::size_t i = 0; i < candidate.size(); ++i) {
        candidate[i] += static_cast<double>(steps) * inc[i];
      }
      const double eps =
          rdp_to_epsilon(orders_, candidate, hard_cap_->delta).epsilon;
      if (eps > hard_cap_->epsilon * (1.0 + 1e-9)) {
        throw BudgetExhaustedError(
            "privacy budget exhausted: charging " + std::to_string(steps) +
            " step(s) would spend epsilon " + std::to_string(eps) +
            " > cap " + std::to_string(hard_cap_->epsilon));
      }
    }
    if (!ledger_.empty() && ledger_.back().name == phase &&
        ledger_.back().q == q && ledger_.back().sigma == sigma) {
      ledger_.back().steps += steps;
    } else {
      ledger_.push_back({std::string(phase), q, sigma, steps});
    }
  }

  std::uint64_t total_steps() const {
    std::uint64_t n = 0;
    for (const auto& r : ledger_) n += r.steps;
    return n;
  }

  const std::vector<PhaseRecord>& ledger() const { return ledger_; }
  const std::vector<double>& orders() const { return orders_; }

  /// Composed (epsilon at delta, minimizing order) over the whole ledger.
  EpsilonAtOrder epsilon(double delta) const {
    if (ledger_.empty()) return {0.0, 0.0};
    return rdp_to_epsilon(orders_, accumulated_rdp(), delta);
  }

  /// Epsilon of a single phase's records viewed in isolation.
  EpsilonAtOrder phase_epsilon(std::string_view phase, double delta) const {
    std::vector<double> rdp(orders_.size(), 0.0);
    bool found = false;
    for (const auto& r : ledger_) {
      if (r.name != phase) continue;
      found = true;
      const std::vector<double> inc = step_rdp(r.q, r.sigma);
      for (std::size_t i = 0; i < rdp.size(); ++i) {
        rdp[i] += static_cast<double>(r.steps) * inc[i];
      }
    }
    if (!found) return {0.0, 0.0};
    return rdp_to_epsilon(orders_, rdp, delta);
  }

  /// Privacy report document; schema:
  /// {total_epsilon, delta, per_phase: [{name, q, sigma, steps,
  ///  epsilon_at_delta}], order_used, accountant}.
  nlohmann::ordered_json report(double delta) const {
    const EpsilonAtOrder total = epsilon(delta);
    nlohmann::ordered_json doc;
    doc["total_epsilon"] = total.epsilon;
    doc["delta"] = delta;
    nlohmann::ordered_json phases = nlohmann::ordered_json::array();
    for (const auto& r : ledger_) {
      nlohmann::ordered_json p;
      p["name"] = r.name;
      p["q"] = r.q;
      p["sigma"] = r.sigma;
      p["steps"] = r.steps;
      p["epsilon_at_delta"] = phase_epsilon(r.name, delta).epsilon;
      phases.push_back(std::move(p));
    }
    doc["per_phase"] = std::move(phases);
    doc["order_used"] = total.order;
    doc["accountant"] = "rdp-subsampled-gaussian-v1";
    return doc;
  }

 private:
  std::vector<double> accumulated_rdp() const {
    std::vector<double> rdp(orders_.size(), 0.0);
    for (const auto& r : ledger_) {
      const std::vector<double> inc = step_rdp(r.q, r.sigma);
      for (std::size_t i = 0; i < rdp.size(); ++i) {
        rdp[i] += static_cast<double>(r.steps) * inc[i];
      }
    }
    return rdp;
  }

  const std::vector<double>& step_rdp(double q, double sigma) const {
    const auto key = std::make_pair(q, sigma);
    auto it = step_cache_.find(key);
    if (it == step_cache_.end()) {
      std::vector<double> v(orders_.size());
      for (std::size_t i = 0; i < orders_.size(); ++i) {
        v[i] = rdp_subsampled_gaussian_step(q, sigma, orders_[i]);
      }
      it = step_cache_.emplace(key, std::move(v)).first;
    }
    return it->second;
  }

  std::vector<double> orders_;
  std::vector<PhaseRecord> ledger_;
  std::optional<PrivacyBudget> hard_cap_;
  mutable std::map<std::pair<double, double>, std::vector<double>> step_cache_;
};

/// Smallest noise multiplier (up to bisection tolerance) whose accounted
/// epsilon over `steps` subsampled-Gaussian steps stays within the target.
struct CalibrationResult {
  double sigma = 0.0;
  /// True when even the smallest representable sigma already meets the
  /// target (e.g. an effectively unbounded epsilon); sigma is then the floor.
  bool clamped_to_floor = false;
};

inline constexpr double kSigmaFloor = 1e-3;
inline constexpr double kSigmaCeiling = 1e6;

inline CalibrationResult calibrate_sigma(PrivacyBudget target, double q,
                                         std::uint64_t steps,
                                         std::span<const double> orders) {
  if (!(target.delta > 0.0 && target.delta < 1.0)) {
    throw ConfigError("calibrate_sigma: delta must lie in (0, 1)");
  }
  if (!(target.epsilon > 0.0)) {
    throw CalibrationError("calibrate_sigma: target epsilon must be > 0");
  }
  if (std::isinf(target.epsilon)) {
    return {kSigmaFloor, true};  // sigma = 0 is rejected even for eps = inf
  }
  auto eps_at = [&](double sigma) {
    return rdp_to_epsilon(orders, rdp_subsampled_gaussian(q, sigma, steps, orders),
                          target.delta)
        .epsilon;
  };
  if (steps == 0 || q == 0.0 || eps_at(kSigmaFloor) <= target.epsilon) {
    return {kSigmaFloor, true};
  }
  double lo = kSigmaFloor;
  double hi = kSigmaFloor;
  while (eps_at(hi) > target.epsilon) {
    lo = hi;
    hi *= 2.0;
    if (hi > kSigmaCeiling) {
      throw CalibrationError(
          "calibrate_sigma: target epsilon " + std::to_string(target.epsilon) +
          " not reachable with sigma <= " + std::to_string(kSigmaCeiling));
    }
  }
  for (int i = 0; i < 100; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (eps_at(mid) > target.epsilon) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return {hi, false};
}

inline CalibrationResult calibrate_sigma(PrivacyBudget target, double q,
                                         std::uint64_t steps) {
  const std::vector<double> orders = default_rdp_orders();
  return calibrate_sigma(target, q, steps, orders);
}

/// Per-phase budget split for the distillation pipeline. All DPSGD phases
/// share one noise multiplier; the initialization phase never touches
/// private data directly (random draws nothing, zero-shot copies reuse
/// already-private or public weights), so it is budgeted (0, 0).
struct BudgetAllocation {
  PrivacyBudget total;
  PrivacyBudget teacher;
  PrivacyBudget init;
  PrivacyBudget distill;
  double sigma = 0.0;
  double q = 0.0;
  std::uint64_t teacher_steps = 0;
  std::uint64_t distill_steps = 0;
};

/// Basic (sequential) composition: epsilons and deltas add. This is the
/// conservative fallback rule; pipelines that share one ledger compose in
/// RDP space instead, which is never worse.
inline PrivacyBudget compose_phases(const PrivacyBudget& a, const PrivacyBudget& b,
                                    const PrivacyBudget& c) {
  return {a.epsilon + b.epsilon + c.epsilon, a.delta + b.delta + c.delta};
}

inline PrivacyBudget compose_phases(const BudgetAllocation& alloc) {
  return compose_phases(alloc.teacher, alloc.init, alloc.distill);
}

/// Splits a total budget across teacher fine-tuning and student distillation
/// by calibrating one shared noise multiplier over the combined step count.
/// Per-phase epsilons are informational, evaluated at half the total delta
/// each (init gets (0, 0)); the binding guarantee is the shared-ledger
/// composition, which lands at most at the total by construction.
inline BudgetAllocation allocate_shared_sigma(PrivacyBudget total, double q,
                                              std::uint64_t teacher_steps,
                                              std::uint64_t distill_steps,
                                              std::span<const double> orders) {
  total.validate_target();
  const CalibrationResult cal =
      calibrate_sigma(total, q, teacher_steps + distill_steps, orders);
  BudgetAllocation alloc;
  alloc.total = total;
  alloc.sigma = cal.sigma;
  alloc.q = q;
  alloc.teacher_steps = teacher_steps;
  alloc.distill_steps = distill_steps;
  const double half_delta = total.delta / 2.0;
  alloc.teacher = {
      rdp_to_epsilon(orders,
                     rdp_subsampled_gaussian(q, cal.sigma, teacher_steps, orders),
                     half_delta)
          .epsilon,
      half_delta};
  alloc.init = {0.0, 0.0};
  alloc.distill = {
      rdp_to_epsilon(orders,
                     rdp_subsampled_gaussian(q, cal.sigma, distill_steps, orders),
                     half_delta)
          .epsilon,
      half_delta};
  return alloc;
}

inline BudgetAllocation allocate_shared_sigma(PrivacyBudget total, double q,
                                              std::uint64_t teacher_steps,
                                              std::uint64_t distill_steps) {
  const std::vector<double> orders = default_rdp_orders();
  return allocate_shared_sigma(total, q, teacher_steps, distill_steps, orders);
}

}  // namespace dpmc
