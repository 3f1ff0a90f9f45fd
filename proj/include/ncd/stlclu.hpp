#pragma once

// Strict-to-loose pseudo-labeling.
//
// DBSCAN parameters are calibrated once on labeled features, then loosened
// every epoch (larger radius, smaller density threshold). At each epoch end the
// actions of samples without ground truth are clustered; non-noise points get
// a pseudo-label that is frozen forever once assigned.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace ncd {

using Point = std::vector<double>;

constexpr int kNoise = -1;

struct ClusterParams {
  double eps = 1.0;
  std::size_t min_pts = 5;

  void validate() const;
  bool operator==(const ClusterParams&) const = default;
};

struct RelaxationSchedule {
  double eps_growth = 1.1;
  std::size_t min_pts_decrement = 1;
  std::size_t min_pts_floor = 2;

  void validate() const;
  bool operator==(const RelaxationSchedule&) const = default;
};

// Classic DBSCAN with Euclidean distance. A point is core when at least
// min_pts points (itself included) lie within eps. Points are scanned in index
// order; clusters are numbered 0, 1, ... in order of creation and a border
// point joins the first cluster that reaches it. Noise is kNoise.
std::vector<int> dbscan(std::span<const Point> points, const ClusterParams& params);

struct CalibrationResult {
  ClusterParams params;
  double accuracy = 0.0;
  double noise_fraction = 0.0;
};

// Grid search over min_pts in {3,4,5,8,10} and eps over the {5,10,...,50}%
// quantiles of the k-nearest-neighbor distance (k = min_pts, self counted),
// scored by Hungarian-matched accuracy on non-noise points, then lower noise
// fraction, then smaller eps.
CalibrationResult calibrate(std::span<const Point> features, std::span<const int> labels);

ClusterParams relax(const ClusterParams& params, const RelaxationSchedule& schedule, int epoch);

// The environment's per-epoch memory of actions, keyed by sample id.
class ActionMemory {
 public:
  void record(std::int64_t sample_id, Point action);
  void clear() { actions_.clear(); }
  std::size_t size() const { return actions_.size(); }
  bool empty() const { return actions_.empty(); }
  const std::map<std::int64_t, Point>& actions() const { return actions_; }

 private:
  std::map<std::int64_t, Point> actions_;
};

// Write-once pseudo-labels. Fresh ids start at first_id (the labeled class
// count) and are issued in increasing order up to, but excluding, id_limit.
class PseudoLabelStore {
 public:
  PseudoLabelStore() = default;
  PseudoLabelStore(int first_id, int id_limit);

  std::optional<int> get(std::int64_t sample_id) const;
  // Freezes a label. Re-freezing with the same label is a no-op; a different
  // label is a contract violation.
  void freeze(std::int64_t sample_id, int label);
  bool can_issue() const { return next_fresh_ < id_limit_; }
  int issue_fresh();

  int first_id() const { return first_id_; }
  int next_fresh() const { return next_fresh_; }
  int id_limit() const { return id_limit_; }
  std::size_t size() const { return labels_.size(); }
  const std::map<std::int64_t, int>& entries() const { return labels_; }

  // Rebuilds a store from persisted state.
  static PseudoLabelStore restore(int first_id, int id_limit, int next_fresh,
                                  std::map<std::int64_t, int> labels);

  bool operator==(const PseudoLabelStore&) const = default;

 private:
  int first_id_ = 0;
  int id_limit_ = 0;
  int next_fresh_ = 0;
  std::map<std::int64_t, int> labels_;
};

struct StlcluStats {
  int epoch = 0;
  double eps = 0.0;
  std::size_t min_pts = 0;
  std::size_t clusters = 0;
  std::size_t new_labels = 0;
  std::size_t skipped_clusters = 0;  // no fresh id left
  double coverage = 0.0;
};

// Clusters every action in memory (the caller only records samples without
// ground truth), updates the store and clears the memory. A cluster that
// contains frozen members hands its majority frozen label (ties to the lowest
// id) to its unfrozen members; otherwise it receives one fresh id.
StlcluStats assign_pseudo_labels(ActionMemory& memory, PseudoLabelStore& store,
                                 const ClusterParams& params, std::size_t total_unlabeled,
                                 int epoch);

}  // namespace ncd
