#pragma once

// The environment loop: pre-training on labeled samples, then full training
// with epsilon-greedy rewards, the combined loss and per-epoch pseudo-labeling.
//
// The trainer only ever sees a TrainingView, so hidden classes of unlabeled
// samples cannot reach the gradients. Evaluation is injected through a
// callback that the caller builds from the full dataset.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ncd/agents.hpp"
#include "ncd/datagen.hpp"
#include "ncd/optimizer.hpp"
#include "ncd/policy_losses.hpp"
#include "ncd/rng.hpp"
#include "ncd/stlclu.hpp"

namespace ncd {

struct TrainConfig {
  int pretrain_epochs = 10;
  int train_epochs = 40;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double eps_min = 0.1;
  double tau = 2.0;
  LossSwitches losses;
  bool stlclu = true;
  RelaxationSchedule schedule;
  bool cluster_cosine = false;  // cluster L2-normalized actions instead of raw ones
  // Cluster actions recomputed with the end-of-epoch weights rather than the
  // ones emitted during the epoch's iterations.
  bool refresh_actions = true;
  std::size_t feature_dim = 64;
  std::size_t heads = 4;
  int pseudo_slots = 0;  // class-head outputs for pseudo classes; 0 means 4 * K_u
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
  bool operator==(const TrainConfig&) const = default;
};

enum class Phase { kPretrain, kTrain };
const char* phase_name(Phase phase);

struct IterationRecord {
  std::int64_t iteration = 0;  // counts both phases
  Phase phase = Phase::kPretrain;
  int epoch = 0;               // 1-based within the phase
  double epsilon = 0.0;
  double lr = 0.0;
  LossBreakdown losses;
  double reward_mean = 0.0;    // over samples with a reference label
  std::size_t batch_size = 0;
};

struct EvalSnapshot {
  double ncd_accuracy = 0.0;
  double map = 0.0;
};

struct EpochRecord {
  Phase phase = Phase::kPretrain;
  int epoch = 0;
  LossBreakdown mean_losses;
  double reward_mean = 0.0;
  double epsilon = 0.0;
  double lr = 0.0;
  double coverage = 0.0;
  std::optional<StlcluStats> stlclu;
  std::optional<EvalSnapshot> eval;
};

struct TrainCallbacks {
  std::function<void(const IterationRecord&)> on_iteration;
  // Returning nullopt skips evaluation for that epoch.
  std::function<std::optional<EvalSnapshot>(const Model&, const PseudoLabelStore&)> evaluate;
};

// Fused actions for the given samples, computed in chunks without gradients.
num::Tensor compute_actions(const Model& model, std::span<const MultiModalSample> samples,
                            std::span<const ModalitySpec> modalities,
                            std::span<const std::size_t> indices);

// Stable digest of a training config plus the dataset signature it runs on.
std::string config_digest(const TrainConfig& config, const TrainingView& data);

class Trainer {
 public:
  Trainer(const TrainConfig& config, const TrainingView& data);

  const TrainConfig& config() const { return config_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const PseudoLabelStore& store() const { return store_; }
  std::optional<ClusterParams> calibrated_params() const { return calibrated_; }
  int completed_pretrain_epochs() const { return pretrain_done_; }
  int completed_train_epochs() const { return train_done_; }
  std::int64_t train_iterations_done() const { return train_step_; }
  std::int64_t iterations_done() const { return iteration_; }
  std::int64_t total_train_iterations() const;
  bool finished() const;

  // Runs the next epoch, pre-training epochs first.
  EpochRecord run_epoch(const TrainCallbacks& callbacks = {});
  std::vector<EpochRecord> pretrain(const TrainCallbacks& callbacks = {});
  std::vector<EpochRecord> train(const TrainCallbacks& callbacks = {});
  std::vector<EpochRecord> run(const TrainCallbacks& callbacks = {});

  void save_checkpoint(const std::filesystem::path& path) const;
  // When `expected` is given, its digest must equal the checkpoint's.
  static Trainer load_checkpoint(const std::filesystem::path& path, const TrainingView& data,
                                 const TrainConfig* expected = nullptr);

  // Fused actions for the given samples, computed in chunks without training.
  num::Tensor infer_actions(std::span<const std::size_t> indices) const;

 private:
  EpochRecord run_phase_epoch(Phase phase, const TrainCallbacks& callbacks);
  void calibrate_on_labeled();
  void check_store_invariants(const PseudoLabelStore& before) const;
  std::optional<std::size_t> reference_label(const MultiModalSample& sample) const;

  TrainConfig config_;
  TrainingView data_;
  Model model_;
  Adam adam_;
  PseudoLabelStore store_;
  ActionMemory memory_;
  Rng greedy_rng_;
  std::optional<ClusterParams> calibrated_;
  std::vector<std::size_t> labeled_indices_;
  std::vector<std::size_t> unlabeled_indices_;
  std::size_t unlabeled_count_ = 0;
  int pretrain_done_ = 0;
  int train_done_ = 0;
  std::int64_t iteration_ = 0;
  std::int64_t train_step_ = 0;
};

}  // namespace ncd
