#pragma once

#include <span>
#include <vector>

namespace ncd {

// Maximum-weight one-to-one assignment (Hungarian algorithm) on a rectangular
// weight matrix. Returns, for every row, the assigned column or -1.
std::vector<int> max_weight_assignment(const std::vector<std::vector<double>>& weights);

// Fraction of items whose predicted cluster maps onto their true class under
// the best one-to-one cluster->class mapping. Predictions < 0 (unassigned or
// noise) always count as errors; surplus clusters map to nothing.
double matched_accuracy(std::span<const int> predicted, std::span<const int> truth);

}  // namespace ncd
