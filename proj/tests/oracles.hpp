#pragma once

// Brute-force reference implementations used to check the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <vector>

namespace oracle {

using Point = std::vector<double>;

inline double dist(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Core points, connected components of the core graph, then each border point
// goes to the adjacent component whose smallest core index is lowest.
inline std::vector<int> dbscan(const std::vector<Point>& pts, double eps, std::size_t min_pts) {
  const std::size_t n = pts.size();
  std::vector<std::vector<std::size_t>> nb(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (dist(pts[i], pts[j]) <= eps) nb[i].push_back(j);
  std::vector<bool> core(n);
  for (std::size_t i = 0; i < n; ++i) core[i] = nb[i].size() >= min_pts;

  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < n; ++i)
    if (core[i])
      for (auto j : nb[i])
        if (core[j]) {
          auto a = find(i), b = find(j);
          if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
  // Root of each component is its smallest index, so ordering roots orders
  // components by smallest core index.
  std::map<std::size_t, int> id;
  for (std::size_t i = 0; i < n; ++i)
    if (core[i] && !id.count(find(i))) id.emplace(find(i), 0);
  int next = 0;
  for (auto& [root, v] : id) v = next++;

  std::vector<int> out(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) {
      out[i] = id[find(i)];
      continue;
    }
    std::size_t best = n;
    for (auto j : nb[i])
      if (core[j]) best = std::min(best, find(j));
    if (best != n) out[i] = id[best];
  }
  return out;
}

// True when a and b induce the same partition (noise must match exactly).
inline bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  std::map<int, int> fwd, bwd;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] < 0) != (b[i] < 0)) return false;
    if (a[i] < 0) continue;
    auto [f, fi] = fwd.emplace(a[i], b[i]);
    auto [g, gi] = bwd.emplace(b[i], a[i]);
    if (f->second != b[i] || g->second != a[i]) return false;
  }
  return true;
}

// Best one-to-one accuracy by trying every injective mapping.
inline double matched_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  std::vector<int> clusters, classes;
  for (int p : pred)
    if (p >= 0 && std::find(clusters.begin(), clusters.end(), p) == clusters.end()) clusters.push_back(p);
  for (int t : truth)
    if (std::find(classes.begin(), classes.end(), t) == classes.end()) classes.push_back(t);
  // Pad classes with dummies so every cluster can map somewhere (or nowhere).
  std::vector<int> targets = classes;
  while (targets.size() < clusters.size()) targets.push_back(-1000 - static_cast<int>(targets.size()));
  std::sort(targets.begin(), targets.end());
  std::size_t best = 0;
  do {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] < 0) continue;
      auto k = std::find(clusters.begin(), clusters.end(), pred[i]) - clusters.begin();
      if (targets[static_cast<std::size_t>(k)] == truth[i]) ++hits;
    }
    best = std::max(best, hits);
  } while (std::next_permutation(targets.begin(), targets.end()));
  return pred.empty() ? 0.0 : static_cast<double>(best) / static_cast<double>(pred.size());
}

// ---- retrieval metrics on explicit relevance lists ----

inline double average_precision(const std::vector<int>& rel) {
  double sum = 0.0;
  int r = 0;
  for (std::size_t k = 1; k <= rel.size(); ++k) {
    if (!rel[k - 1]) continue;
    ++r;
    int hits = 0;
    for (std::size_t j = 0; j < k; ++j) hits += rel[j];
    sum += static_cast<double>(hits) / static_cast<double>(k);
  }
  return sum / r;
}

inline double ndcg(const std::vector<int>& rel, std::size_t k) {
  double dcg = 0.0, idcg = 0.0;
  int total = 0;
  for (int x : rel) total += x;
  for (std::size_t i = 1; i <= std::min(k, rel.size()); ++i)
    dcg += rel[i - 1] / std::log2(static_cast<double>(i) + 1.0);
  for (std::size_t i = 1; i <= std::min<std::size_t>(k, static_cast<std::size_t>(total)); ++i)
    idcg += 1.0 / std::log2(static_cast<double>(i) + 1.0);
  return idcg == 0.0 ? 0.0 : dcg / idcg;
}

inline double nmrr(const std::vector<int>& rel, int max_ng) {
  int ng = 0;
  for (int x : rel) ng += x;
  const double k = std::min(4.0 * ng, 2.0 * max_ng);
  double avr = 0.0;
  for (std::size_t i = 0; i < rel.size(); ++i)
    if (rel[i]) avr += (static_cast<double>(i + 1) > k ? 1.25 * k : static_cast<double>(i + 1));
  avr /= ng;
  return (avr - 0.5 - ng / 2.0) / (1.25 * k - 0.5 - ng / 2.0);
}

// Interpolated precision at recall r: max precision over cutoffs reaching r.
inline double interpolated_precision(const std::vector<int>& rel, double r) {
  int total = 0;
  for (int x : rel) total += x;
  double best = 0.0;
  for (std::size_t k = 1; k <= rel.size(); ++k) {
    int hits = 0;
    for (std::size_t j = 0; j < k; ++j) hits += rel[j];
    if (static_cast<double>(hits) / total >= r - 1e-12) best = std::max(best, static_cast<double>(hits) / k);
  }
  return best;
}

// ---- dense linear algebra ----

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t r, std::size_t k, std::size_t c) {
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t t = 0; t < k; ++t) out[i * c + j] += a[i * k + t] * b[t * c + j];
  return out;
}

}  // namespace oracle
