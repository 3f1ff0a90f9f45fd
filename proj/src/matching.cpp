#include "ncd/matching.hpp"

#include <algorithm>
#include <limits>
#include <map>

#include "ncd/errors.hpp"

namespace ncd {

std::vector<int> max_weight_assignment(const std::vector<std::vector<double>>& weights) {
  const std::size_t rows = weights.size();
  if (rows == 0) return {};
  const std::size_t cols = weights[0].size();
  const std::size_t n = std::max(rows, cols);
  double top = 0.0;
  for (const auto& r : weights) {
    if (r.size() != cols) throw ContractError("max_weight_assignment: ragged weight matrix");
    for (double w : r) top = std::max(top, w);
  }
  // Square cost matrix, 1-indexed for the potentials formulation.
  auto cost = [&](std::size_t i, std::size_t j) {
    if (i - 1 < rows && j - 1 < cols) return top - weights[i - 1][j - 1];
    return top;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1), v(n + 1);
  std::vector<std::size_t> match(n + 1), way(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assignment(rows, -1);
  for (std::size_t j = 1; j <= n; ++j) {
    const std::size_t i = match[j];
    if (i >= 1 && i <= rows && j <= cols) assignment[i - 1] = static_cast<int>(j - 1);
  }
  return assignment;
}

double matched_accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size())
    throw ContractError("matched_accuracy: prediction and truth lengths differ");
  if (predicted.empty()) return 0.0;
  std::map<int, std::size_t> cluster_index, class_index;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] >= 0) cluster_index.emplace(predicted[i], 0);
    class_index.emplace(truth[i], 0);
  }
  std::size_t k = 0;
  for (auto& [id, idx] : cluster_index) idx = k++;
  k = 0;
  for (auto& [id, idx] : class_index) idx = k++;
  std::vector<std::vector<double>> counts(cluster_index.size(),
                                          std::vector<double>(class_index.size(), 0.0));
  for (std::size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i] >= 0) counts[cluster_index[predicted[i]]][class_index[truth[i]]] += 1.0;
  const auto assignment = max_weight_assignment(counts);
  double matched = 0.0;
  for (std::size_t r = 0; r < assignment.size(); ++r)
    if (assignment[r] >= 0) matched += counts[r][assignment[r]];
  return matched / static_cast<double>(predicted.size());
}

}  // namespace ncd
