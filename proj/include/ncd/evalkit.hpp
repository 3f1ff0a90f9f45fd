#pragma once

// Open-set retrieval metrics, matched clustering accuracy and embedding export.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ncd/numkit.hpp"

namespace ncd {

struct LabeledFeatures {
  num::Tensor features;  // [n x d]
  std::vector<std::int64_t> ids;
  std::vector<int> classes;
};

struct RankedQuery {
  std::int64_t query_id = 0;
  int query_class = 0;
  std::vector<std::int64_t> ranked_ids;
  std::vector<char> relevant;  // per rank
  std::size_t relevant_total() const;
};

struct RankedRetrievalRun {
  std::vector<RankedQuery> queries;
};

// Targets ranked by descending cosine similarity, ties by ascending target id.
RankedRetrievalRun build_run(const LabeledFeatures& queries, const LabeledFeatures& targets);

double nn_metric(const RankedRetrievalRun& run);
double map_metric(const RankedRetrievalRun& run);
double ndcg_at(const RankedRetrievalRun& run, std::size_t k = 100);
// MPEG-7 average normalized modified retrieval rank; 0 is perfect.
double anmrr(const RankedRetrievalRun& run);

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

// Interpolated precision at recall 0, 0.01, ..., 1, averaged over queries.
std::vector<PrPoint> pr_curve(const RankedRetrievalRun& run);

// Hungarian-matched accuracy; negative predictions count as errors.
double ncd_accuracy(std::span<const int> predicted, std::span<const int> truth);

struct RetrievalMetrics {
  double map = 0.0;
  double nn = 0.0;
  double ndcg = 0.0;
  double anmrr = 0.0;
};
RetrievalMetrics retrieval_metrics(const RankedRetrievalRun& run);

struct PcaResult {
  num::Tensor projection;           // [n x dims]
  std::vector<double> eigenvalues;  // all of them, descending
  std::size_t rank = 0;             // components with non-negligible variance
  double reconstruction_error = 0.0;  // mean squared residual per sample
};

// Projects centered features onto the top `dims` covariance eigenvectors.
// Components beyond the covariance rank are zero-filled.
PcaResult pca_project(const num::Tensor& features, std::size_t dims = 2);

// CSV of id, coordinates, label with 6 significant digits.
void export_embeddings(const std::filesystem::path& path, std::span<const std::int64_t> ids,
                       const num::Tensor& coords, std::span<const int> labels);

std::string format_number(double x);
void write_pr_curve_csv(const std::filesystem::path& path, std::span<const PrPoint> curve);

}  // namespace ncd
