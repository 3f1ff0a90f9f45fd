#include "ncd/stlclu.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>

#include "ncd/errors.hpp"
#include "ncd/matching.hpp"

namespace ncd {

namespace {

// Dense pairwise Euclidean distances.
class DistanceMatrix {
 public:
  explicit DistanceMatrix(std::span<const Point> points) : n_(points.size()), d_(n_ * n_, 0.0) {
    for (std::size_t i = 0; i < n_; ++i) {
      if (points[i].size() != points[0].size())
        throw ContractError("dbscan: points have mixed dimensions");
      for (std::size_t j = i + 1; j < n_; ++j) {
        double sq = 0.0;
        for (std::size_t k = 0; k < points[i].size(); ++k) {
          const double diff = points[i][k] - points[j][k];
          sq += diff * diff;
        }
        d_[i * n_ + j] = d_[j * n_ + i] = std::sqrt(sq);
      }
    }
  }

  std::size_t size() const { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return d_[i * n_ + j]; }

 private:
  std::size_t n_;
  std::vector<double> d_;
};

std::vector<int> dbscan_on(const DistanceMatrix& dist, const ClusterParams& params) {
  const std::size_t n = dist.size();
  std::vector<std::vector<std::size_t>> neighbors(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (dist(i, j) <= params.eps) neighbors[i].push_back(j);

  constexpr int kUnvisited = -2;
  std::vector<int> label(n, kUnvisited);
  int cluster = 0;
  std::deque<std::size_t> frontier;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] != kUnvisited) continue;
    if (neighbors[i].size() < params.min_pts) {
      label[i] = kNoise;
      continue;
    }
    label[i] = cluster;
    frontier.assign(neighbors[i].begin(), neighbors[i].end());
    while (!frontier.empty()) {
      const std::size_t p = frontier.front();
      frontier.pop_front();
      if (label[p] == kNoise) label[p] = cluster;  // border point claimed
      if (label[p] != kUnvisited) continue;
      label[p] = cluster;
      if (neighbors[p].size() >= params.min_pts)
        frontier.insert(frontier.end(), neighbors[p].begin(), neighbors[p].end());
    }
    ++cluster;
  }
  return label;
}

}  // namespace

void ClusterParams::validate() const {
  if (!(eps > 0.0)) throw ConfigError("cluster eps must be positive");
  if (min_pts < 1) throw ConfigError("cluster min-pts must be at least 1");
}

void RelaxationSchedule::validate() const {
  if (!(eps_growth > 1.0)) throw ConfigError("eps-growth must be greater than 1");
  if (min_pts_floor < 1) throw ConfigError("min-pts-floor must be at least 1");
}

std::vector<int> dbscan(std::span<const Point> points, const ClusterParams& params) {
  params.validate();
  if (points.empty()) return {};
  return dbscan_on(DistanceMatrix(points), params);
}

CalibrationResult calibrate(std::span<const Point> features, std::span<const int> labels) {
  if (features.size() != labels.size())
    throw ContractError("calibrate: feature and label counts differ");
  std::vector<int> distinct(labels.begin(), labels.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) throw ContractError("calibrate: needs at least two labeled classes");

  const DistanceMatrix dist(features);
  const std::size_t n = features.size();
  static constexpr std::size_t kMinPtsGrid[] = {3, 4, 5, 8, 10};

  std::optional<CalibrationResult> best;
  std::vector<double> row(n), kdist(n);
  for (std::size_t min_pts : kMinPtsGrid) {
    if (min_pts > n) continue;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) row[j] = dist(i, j);
      std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(min_pts - 1), row.end());
      kdist[i] = row[min_pts - 1];
    }
    std::sort(kdist.begin(), kdist.end());
    for (int pct = 5; pct <= 50; pct += 5) {
      // Nearest-rank quantile.
      const auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
      const double eps = std::max(kdist[std::max<std::size_t>(rank, 1) - 1], 1e-12);
      const ClusterParams params{eps, min_pts};
      const auto assignment = dbscan_on(dist, params);
      std::vector<int> pred, truth;
      for (std::size_t i = 0; i < n; ++i) {
        if (assignment[i] == kNoise) continue;
        pred.push_back(assignment[i]);
        truth.push_back(labels[i]);
      }
      if (pred.empty()) continue;
      CalibrationResult candidate{params, matched_accuracy(pred, truth),
                                  1.0 - static_cast<double>(pred.size()) / static_cast<double>(n)};
      const bool better =
          !best || candidate.accuracy > best->accuracy ||
          (candidate.accuracy == best->accuracy &&
           (candidate.noise_fraction < best->noise_fraction ||
            (candidate.noise_fraction == best->noise_fraction &&
             candidate.params.eps < best->params.eps)));
      if (better) best = candidate;
    }
  }
  if (!best) throw CalibrationError("calibrate: every grid configuration labels all points as noise");
  return *best;
}

ClusterParams relax(const ClusterParams& params, const RelaxationSchedule& schedule, int epoch) {
  if (epoch < 0) throw ContractError("relax: epoch must be non-negative");
  ClusterParams out = params;
  out.eps = params.eps * std::pow(schedule.eps_growth, epoch);
  const std::size_t shrink = schedule.min_pts_decrement * static_cast<std::size_t>(epoch);
  const std::size_t reduced = shrink >= params.min_pts ? 0 : params.min_pts - shrink;
  out.min_pts = std::max(schedule.min_pts_floor, reduced);
  // The floor never raises a threshold that already started below it.
  out.min_pts = std::min(out.min_pts, std::max(params.min_pts, std::size_t{1}));
  return out;
}

void ActionMemory::record(std::int64_t sample_id, Point action) {
  if (!actions_.empty() && actions_.begin()->second.size() != action.size())
    throw ContractError("action memory: action width " + std::to_string(action.size()) +
                        " differs from " + std::to_string(actions_.begin()->second.size()));
  if (!actions_.emplace(sample_id, std::move(action)).second)
    throw ContractError("action memory: sample " + std::to_string(sample_id) +
                        " already recorded this epoch");
}

PseudoLabelStore::PseudoLabelStore(int first_id, int id_limit)
    : first_id_(first_id), id_limit_(id_limit), next_fresh_(first_id) {
  if (id_limit < first_id) throw ContractError("pseudo-label store: id limit below first id");
}

std::optional<int> PseudoLabelStore::get(std::int64_t sample_id) const {
  auto it = labels_.find(sample_id);
  if (it == labels_.end()) return std::nullopt;
  return it->second;
}

void PseudoLabelStore::freeze(std::int64_t sample_id, int label) {
  if (label < first_id_ || label >= next_fresh_)
    throw ContractError("pseudo-label store: label " + std::to_string(label) + " was never issued");
  auto [it, inserted] = labels_.emplace(sample_id, label);
  if (!inserted && it->second != label)
    throw ContractError("pseudo-label store: sample " + std::to_string(sample_id) +
                        " is frozen at " + std::to_string(it->second) +
                        ", refusing " + std::to_string(label));
}

int PseudoLabelStore::issue_fresh() {
  if (!can_issue()) throw ContractError("pseudo-label store: fresh ids exhausted");
  return next_fresh_++;
}

PseudoLabelStore PseudoLabelStore::restore(int first_id, int id_limit, int next_fresh,
                                           std::map<std::int64_t, int> labels) {
  PseudoLabelStore store(first_id, id_limit);
  if (next_fresh < first_id || next_fresh > id_limit)
    throw ContractError("pseudo-label store: next fresh id out of range");
  store.next_fresh_ = next_fresh;
  for (const auto& [id, label] : labels) store.freeze(id, label);
  return store;
}

StlcluStats assign_pseudo_labels(ActionMemory& memory, PseudoLabelStore& store,
                                 const ClusterParams& params, std::size_t total_unlabeled,
                                 int epoch) {
  StlcluStats stats;
  stats.epoch = epoch;
  stats.eps = params.eps;
  stats.min_pts = params.min_pts;

  std::vector<std::int64_t> ids;
  std::vector<Point> points;
  for (const auto& [id, action] : memory.actions()) {
    ids.push_back(id);
    points.push_back(action);
  }
  const auto assignment = dbscan(points, params);
  int clusters = 0;
  for (int a : assignment) clusters = std::max(clusters, a + 1);
  stats.clusters = static_cast<std::size_t>(clusters);

  std::vector<std::vector<std::size_t>> members(clusters);
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] != kNoise) members[assignment[i]].push_back(i);

  for (const auto& group : members) {
    std::map<int, std::size_t> frozen_votes;
    for (auto i : group)
      if (auto label = store.get(ids[i])) ++frozen_votes[*label];
    int label = -1;
    if (!frozen_votes.empty()) {
      std::size_t top = 0;
      for (const auto& [candidate, votes] : frozen_votes)  // ascending ids: ties keep the lowest
        if (votes > top) {
          top = votes;
          label = candidate;
        }
    } else if (store.can_issue()) {
      label = store.issue_fresh();
    } else {
      ++stats.skipped_clusters;
      continue;
    }
    for (auto i : group) {
      if (store.get(ids[i])) continue;
      store.freeze(ids[i], label);
      ++stats.new_labels;
    }
  }
  memory.clear();
  stats.coverage = total_unlabeled == 0
                       ? 1.0
                       : static_cast<double>(store.size()) / static_cast<double>(total_unlabeled);
  return stats;
}

}  // namespace ncd
