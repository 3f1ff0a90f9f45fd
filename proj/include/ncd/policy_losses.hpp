#pragma once

// Reward, epsilon-greedy exploration and the three training losses.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ncd/numkit.hpp"
#include "ncd/rng.hpp"

namespace ncd {

// Linear decay from 1 to eps_min over `total` steps, floored at eps_min.
double epsilon(std::int64_t step, std::int64_t total, double eps_min);

// With probability eps a uniformly random class, otherwise the argmax of
// `probs` (ties go to the lowest index). Always consumes exactly one uniform
// draw, plus one class draw when exploring.
std::size_t select_class(std::span<const double> probs, double eps, Rng& rng);

std::size_t argmax(std::span<const double> values);

inline int reward(std::size_t chosen, std::size_t reference) {
  return chosen == reference ? 1 : 0;
}

struct RewardRecord {
  std::int64_t sample_id = 0;
  std::size_t chosen = 0;
  std::size_t reference = 0;
  int reward = 0;
};

// Plain-value form of the TD term for a single sample.
double loss_td(double q, int r);

// Mean of 0.5 * (q_i - r_i)^2 over the rows listed in `rows`; q is [n x 1].
// An empty selection gives a constant zero.
num::Var loss_td(const num::Var& q, std::span<const std::size_t> rows,
                 std::span<const int> rewards);

// Cross-entropy over samples that carry a label (ground truth or pseudo);
// labels[i] == nullopt excludes sample i. probs is [n x c] and is clamped to
// [1e-12, 1 - 1e-12] inside the log. No labeled sample gives a constant zero.
num::Var loss_ce(const num::Var& probs, std::span<const std::optional<std::size_t>> labels);

// Contrastive loss between paired group features, temperature tau. A zero
// row is a DegenerateVectorError.
num::Var loss_ss(const num::Var& alpha, const num::Var& beta, double tau = 2.0);

struct LossSwitches {
  bool td = true;
  bool ce = true;
  bool ss = true;
  bool operator==(const LossSwitches&) const = default;
};

struct LossBreakdown {
  double l_td = 0.0;
  double l_ce = 0.0;
  double l_ss = 0.0;
  double total = 0.0;
};

struct TotalLoss {
  num::Var value;
  LossBreakdown breakdown;
};

// Unweighted sum of the enabled terms. A disabled term contributes exactly 0.
TotalLoss total_loss(const num::Var& td, const num::Var& ce, const num::Var& ss,
                     const LossSwitches& switches);

}  // namespace ncd
