#pragma once

// End-to-end runs: dataset preparation, training with per-epoch evaluation,
// and the artifacts written into a per-run directory.

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ncd/evalkit.hpp"
#include "ncd/run_config.hpp"
#include "ncd/trainer.hpp"

namespace ncd {

inline constexpr const char* kToolVersion = "0.3.0";

// Loads or generates the dataset and applies random modality dropping.
Dataset prepare_dataset(const RunConfig& config);

struct EvalReport {
  RetrievalMetrics retrieval;
  double ncd_accuracy = 0.0;
  std::size_t queries = 0;
  std::size_t targets = 0;
  std::vector<PrPoint> pr;
  LabeledFeatures embeddings;  // queries then targets
};

// Retrieval over the novel classes (query/target split) and matched accuracy
// of the pseudo-labels on every sample without ground truth.
EvalReport evaluate_model(const Model& model, const PseudoLabelStore& store, const Dataset& ds,
                          const EvalOptions& options, std::uint64_t seed);

std::string run_digest(const RunConfig& config);

// <root>/<digest8>-s<seed>; root defaults to $NCD_OUTPUT_ROOT, then ./runs.
std::filesystem::path default_run_dir(const RunConfig& config,
                                      const std::optional<std::filesystem::path>& root = {});

struct RunOptions {
  std::filesystem::path run_dir;
  bool resume = false;               // continue from run_dir/checkpoint.bin
  std::optional<int> max_epochs;     // stop after this many epochs in this invocation
  std::ostream* log = nullptr;       // progress lines, one per epoch
};

struct RunSummary {
  std::filesystem::path run_dir;
  std::vector<EpochRecord> epochs;  // run in this invocation
  bool finished = false;
  std::optional<EvalReport> final_report;
};

RunSummary run_experiment(const RunConfig& config, const RunOptions& options);

// Writes metrics.csv, pr_curve.csv, embeddings.csv and embeddings_pca.csv.
std::vector<std::filesystem::path> write_eval_artifacts(const EvalReport& report,
                                                        const std::filesystem::path& dir);

}  // namespace ncd
