#pragma once

// Synthetic multi-modal datasets with an open-set split: labeled classes
// [0, K_l) and novel classes [K_l, K_l + K_u) never share members.
//
// Each class has a latent mean; each object draws a latent point around it and
// every modality observes that point through its own fixed random projection
// plus noise, so the modalities are correlated views of one object.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ncd {

struct ModalitySpec {
  std::size_t id = 0;
  std::size_t dim = 1;
  bool operator==(const ModalitySpec&) const = default;
};

enum class LabelKind { kGroundTruth, kPseudo, kUnlabeled };

struct LabelState {
  LabelKind kind = LabelKind::kUnlabeled;
  int label = -1;

  static LabelState ground_truth(int c) { return {LabelKind::kGroundTruth, c}; }
  static LabelState pseudo(int c) { return {LabelKind::kPseudo, c}; }
  static LabelState unlabeled() { return {}; }
  bool has_label() const { return kind != LabelKind::kUnlabeled; }
  bool operator==(const LabelState&) const = default;
};

using ModalityVector = std::optional<std::vector<double>>;

struct MultiModalSample {
  std::int64_t id = 0;
  std::vector<ModalityVector> modalities;  // nullopt marks a missing modality
  LabelState label;

  std::size_t present_count() const;
  bool operator==(const MultiModalSample&) const = default;
};

// What training code is allowed to see: label states, never hidden classes.
struct TrainingView {
  std::span<const ModalitySpec> modalities;
  std::span<const MultiModalSample> samples;
  int num_labeled_classes = 0;
  int num_novel_classes = 0;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<ModalitySpec> modalities, std::vector<MultiModalSample> samples,
          std::vector<int> hidden_classes, int num_labeled_classes,
          int num_novel_classes, std::uint64_t seed);

  const std::vector<ModalitySpec>& modalities() const { return modalities_; }
  const std::vector<MultiModalSample>& samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  int num_labeled_classes() const { return num_labeled_classes_; }
  int num_novel_classes() const { return num_novel_classes_; }
  int num_classes() const { return num_labeled_classes_ + num_novel_classes_; }
  std::uint64_t seed() const { return seed_; }

  TrainingView training_view() const;

  // Evaluation-only access to the true class of every sample.
  const std::vector<int>& hidden_classes() const { return hidden_; }

  // Same header and hidden classes, replaced samples (validated).
  Dataset with_samples(std::vector<MultiModalSample> samples) const;

  bool operator==(const Dataset&) const = default;

 private:
  std::vector<ModalitySpec> modalities_;
  std::vector<MultiModalSample> samples_;
  std::vector<int> hidden_;
  int num_labeled_classes_ = 0;
  int num_novel_classes_ = 0;
  std::uint64_t seed_ = 0;
};

struct GeneratorConfig {
  int num_labeled_classes = 8;
  int num_novel_classes = 8;
  int samples_per_class = 100;
  std::size_t latent_dim = 16;
  std::vector<std::size_t> modality_dims{8, 8, 8, 8};
  double sigma_between = 1.0;
  double sigma_within = 0.1;
  double sigma_observation = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

Dataset generate_dataset(const GeneratorConfig& config);

// Marks each (sample, modality) pair missing with probability p. A sample that
// would lose everything keeps one uniformly chosen modality.
Dataset drop_modalities(const Dataset& ds, double p, std::uint64_t seed);

// Marks modality `modality` missing everywhere it is not the last survivor.
Dataset remove_modality(const Dataset& ds, std::size_t modality);

struct QueryTargetSplit {
  std::vector<std::size_t> queries;  // indices into ds.samples()
  std::vector<std::size_t> targets;
};

// Splits the samples whose hidden class is in `classes` (all classes when
// empty) into `per_class_queries` queries per class and the rest as targets.
QueryTargetSplit split_query_target(const Dataset& ds, int per_class_queries,
                                    std::uint64_t seed,
                                    std::span<const int> classes = {});

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::string serialize_dataset(const Dataset& ds);
Dataset parse_dataset(const std::string& text);

// Batches of sample indices. Order is a permutation fixed by (seed, epoch).
std::vector<std::vector<std::size_t>> batch_iterator(std::size_t num_samples,
                                                     std::size_t batch_size,
                                                     std::uint64_t seed, int epoch);

// Nearest-centroid accuracy of concatenated raw modalities against hidden
// classes (missing modalities read as zeros). A separability probe.
double nearest_centroid_accuracy(const Dataset& ds);

}  // namespace ncd
