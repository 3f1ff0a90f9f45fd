#include "ncd/policy_losses.hpp"

#include <algorithm>
#include <string>

#include "ncd/errors.hpp"

namespace ncd {

using num::Tensor;
using num::Var;

namespace {
constexpr double kProbFloor = 1e-12;
constexpr double kProbCeil = 1.0 - 1e-12;

Var zero_scalar() { return Var::constant(Tensor::scalar(0.0)); }
}  // namespace

double epsilon(std::int64_t step, std::int64_t total, double eps_min) {
  if (total <= 0) throw ConfigError("epsilon schedule: total iterations must be >= 1");
  if (eps_min < 0.0 || eps_min > 1.0) throw ConfigError("epsilon schedule: eps-min must be in [0, 1]");
  const double decayed =
      1.0 - (1.0 - eps_min) * static_cast<double>(step) / static_cast<double>(total);
  return std::max(eps_min, decayed);
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

std::size_t select_class(std::span<const double> probs, double eps, Rng& rng) {
  if (probs.empty()) throw ContractError("select_class: empty probability vector");
  if (rng.uniform() < eps) return static_cast<std::size_t>(rng.below(probs.size()));
  return argmax(probs);
}

double loss_td(double q, int r) {
  const double diff = q - static_cast<double>(r);
  return 0.5 * diff * diff;
}

Var loss_td(const Var& q, std::span<const std::size_t> rows, std::span<const int> rewards) {
  if (rows.size() != rewards.size())
    throw ContractError("loss_td: row and reward counts differ");
  if (rows.empty()) return zero_scalar();
  Tensor targets({rows.size(), 1});
  for (std::size_t i = 0; i < rewards.size(); ++i) targets[i] = rewards[i];
  Var diff = num::sub(num::select_rows(q, rows), Var::constant(std::move(targets)));
  return num::scale(num::mean(num::square(diff)), 0.5);
}

Var loss_ce(const Var& probs, std::span<const std::optional<std::size_t>> labels) {
  const std::size_t n = probs.value().rows(), c = probs.value().cols();
  if (labels.size() != n) throw ContractError("loss_ce: label count does not match batch size");
  std::vector<std::size_t> rows, cols;
  for (std::size_t i = 0; i < n; ++i) {
    if (!labels[i]) continue;
    if (*labels[i] >= c)
      throw ContractError("loss_ce: label " + std::to_string(*labels[i]) +
                          " out of range for " + std::to_string(c) + " classes");
    rows.push_back(i);
    cols.push_back(*labels[i]);
  }
  if (rows.empty()) return zero_scalar();
  Var chosen = num::pick(num::select_rows(probs, rows), cols);
  return num::scale(num::mean(num::log_clamped(chosen, kProbFloor, kProbCeil)), -1.0);
}

Var loss_ss(const Var& alpha, const Var& beta, double tau) {
  if (alpha.shape() != beta.shape())
    throw DimensionError("loss_ss: group features differ in shape " +
                         num::shape_string(alpha.shape()) + " vs " +
                         num::shape_string(beta.shape()));
  if (!(tau > 0.0)) throw ContractError("loss_ss: temperature must be positive");
  Var a = num::normalize_rows(alpha);
  Var b = num::normalize_rows(beta);
  Var logits = num::scale(num::matmul(a, num::transpose(b)), 1.0 / tau);
  return num::scale(num::mean(num::diagonal(num::log_softmax_rows(logits))), -1.0);
}

TotalLoss total_loss(const Var& td, const Var& ce, const Var& ss, const LossSwitches& switches) {
  TotalLoss out;
  std::vector<Var> terms;
  if (switches.td) {
    out.breakdown.l_td = td.item();
    terms.push_back(td);
  }
  if (switches.ce) {
    out.breakdown.l_ce = ce.item();
    terms.push_back(ce);
  }
  if (switches.ss) {
    out.breakdown.l_ss = ss.item();
    terms.push_back(ss);
  }
  if (terms.empty()) {
    out.value = zero_scalar();
  } else {
    out.value = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) out.value = num::add(out.value, terms[i]);
  }
  out.breakdown.total = out.value.item();
  return out;
}

}  // namespace ncd
