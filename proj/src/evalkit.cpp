#include "ncd/evalkit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

#include "ncd/errors.hpp"
#include "ncd/matching.hpp"

namespace ncd {

using num::Tensor;

namespace {

std::vector<double> row_norms(const Tensor& x, const char* what) {
  std::vector<double> norms(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double sq = 0.0;
    for (double v : x.row(r)) sq += v * v;
    norms[r] = std::sqrt(sq);
    if (norms[r] < 1e-12)
      throw DegenerateVectorError(std::string("build_run: ") + what + " row " + std::to_string(r) +
                                  " has zero norm");
  }
  return norms;
}

void check_labeled(const LabeledFeatures& f, const char* what) {
  const std::size_t n = f.features.size() == 0 ? 0 : f.features.rows();
  if (f.ids.size() != n || f.classes.size() != n)
    throw ContractError(std::string("build_run: ") + what + " ids/classes do not match feature rows");
}

void require_relevant(const RankedQuery& q, const char* metric) {
  if (q.relevant_total() == 0)
    throw ProtocolError(std::string(metric) + ": query " + std::to_string(q.query_id) +
                        " has no relevant target");
}

}  // namespace

std::size_t RankedQuery::relevant_total() const {
  return static_cast<std::size_t>(std::count(relevant.begin(), relevant.end(), 1));
}

RankedRetrievalRun build_run(const LabeledFeatures& queries, const LabeledFeatures& targets) {
  check_labeled(queries, "query");
  check_labeled(targets, "target");
  RankedRetrievalRun run;
  if (queries.ids.empty()) return run;
  if (targets.ids.empty()) throw ContractError("build_run: no targets");
  if (queries.features.cols() != targets.features.cols())
    throw DimensionError("build_run: query width " + std::to_string(queries.features.cols()) +
                         " differs from target width " + std::to_string(targets.features.cols()));
  const auto qn = row_norms(queries.features, "query");
  const auto tn = row_norms(targets.features, "target");
  const std::size_t nt = targets.ids.size(), d = targets.features.cols();

  std::vector<std::size_t> order(nt);
  std::vector<double> sim(nt);
  for (std::size_t q = 0; q < queries.ids.size(); ++q) {
    const auto qrow = queries.features.row(q);
    for (std::size_t t = 0; t < nt; ++t) {
      const auto trow = targets.features.row(t);
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += qrow[k] * trow[k];
      sim[t] = dot / (qn[q] * tn[t]);
    }
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (sim[a] != sim[b]) return sim[a] > sim[b];
      return targets.ids[a] < targets.ids[b];
    });
    RankedQuery rq;
    rq.query_id = queries.ids[q];
    rq.query_class = queries.classes[q];
    rq.ranked_ids.reserve(nt);
    rq.relevant.reserve(nt);
    for (auto t : order) {
      rq.ranked_ids.push_back(targets.ids[t]);
      rq.relevant.push_back(targets.classes[t] == rq.query_class ? 1 : 0);
    }
    run.queries.push_back(std::move(rq));
  }
  return run;
}

double nn_metric(const RankedRetrievalRun& run) {
  if (run.queries.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& q : run.queries) {
    if (q.relevant.empty()) throw ProtocolError("nn: query " + std::to_string(q.query_id) + " has no targets");
    hits += q.relevant[0] == 1;
  }
  return static_cast<double>(hits) / static_cast<double>(run.queries.size());
}

double map_metric(const RankedRetrievalRun& run) {
  if (run.queries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& q : run.queries) {
    require_relevant(q, "map");
    double ap = 0.0;
    std::size_t seen = 0;
    for (std::size_t k = 0; k < q.relevant.size(); ++k) {
      if (!q.relevant[k]) continue;
      ++seen;
      ap += static_cast<double>(seen) / static_cast<double>(k + 1);
    }
    total += ap / static_cast<double>(seen);
  }
  return total / static_cast<double>(run.queries.size());
}

double ndcg_at(const RankedRetrievalRun& run, std::size_t k) {
  if (k == 0) throw ContractError("ndcg: k must be at least 1");
  if (run.queries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& q : run.queries) {
    double dcg = 0.0, ideal = 0.0;
    const std::size_t limit = std::min(k, q.relevant.size());
    for (std::size_t i = 0; i < limit; ++i)
      if (q.relevant[i]) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    const std::size_t ideal_hits = std::min(k, q.relevant_total());
    for (std::size_t i = 0; i < ideal_hits; ++i) ideal += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    total += ideal > 0.0 ? dcg / ideal : 0.0;
  }
  return total / static_cast<double>(run.queries.size());
}

double anmrr(const RankedRetrievalRun& run) {
  if (run.queries.empty()) return 0.0;
  std::size_t max_ng = 0;
  for (const auto& q : run.queries) {
    require_relevant(q, "anmrr");
    max_ng = std::max(max_ng, q.relevant_total());
  }
  double total = 0.0;
  for (const auto& q : run.queries) {
    const auto ng = static_cast<double>(q.relevant_total());
    const double k = std::min(4.0 * ng, 2.0 * static_cast<double>(max_ng));
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < q.relevant.size(); ++i) {
      if (!q.relevant[i]) continue;
      const auto rank = static_cast<double>(i + 1);
      rank_sum += rank <= k ? rank : 1.25 * k;
    }
    const double avr = rank_sum / ng;
    const double mrr = avr - 0.5 - ng / 2.0;
    total += mrr / (1.25 * k - 0.5 - 0.5 * ng);
  }
  return total / static_cast<double>(run.queries.size());
}

std::vector<PrPoint> pr_curve(const RankedRetrievalRun& run) {
  constexpr std::size_t kPoints = 101;
  std::vector<PrPoint> curve(kPoints);
  for (std::size_t i = 0; i < kPoints; ++i) curve[i].recall = static_cast<double>(i) / 100.0;
  if (run.queries.empty()) return curve;
  std::vector<double> interp(kPoints);
  for (const auto& q : run.queries) {
    require_relevant(q, "pr_curve");
    const auto total = static_cast<double>(q.relevant_total());
    std::fill(interp.begin(), interp.end(), 0.0);
    std::size_t hits = 0;
    for (std::size_t k = 0; k < q.relevant.size(); ++k) {
      hits += q.relevant[k] == 1;
      const double recall = static_cast<double>(hits) / total;
      const double precision = static_cast<double>(hits) / static_cast<double>(k + 1);
      for (std::size_t i = 0; i < kPoints && curve[i].recall <= recall + 1e-12; ++i)
        interp[i] = std::max(interp[i], precision);
    }
    for (std::size_t i = 0; i < kPoints; ++i) curve[i].precision += interp[i];
  }
  for (auto& p : curve) p.precision /= static_cast<double>(run.queries.size());
  return curve;
}

double ncd_accuracy(std::span<const int> predicted, std::span<const int> truth) {
  return matched_accuracy(predicted, truth);
}

RetrievalMetrics retrieval_metrics(const RankedRetrievalRun& run) {
  return {map_metric(run), nn_metric(run), ndcg_at(run, 100), anmrr(run)};
}

PcaResult pca_project(const Tensor& features, std::size_t dims) {
  const std::size_t n = features.rows(), d = features.cols();
  if (dims == 0) throw ContractError("pca: dims must be at least 1");
  if (n < dims)
    throw ContractError("pca: need at least " + std::to_string(dims) + " samples, got " + std::to_string(n));
  Eigen::MatrixXd x(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) x(r, c) = features(r, c);
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NonFiniteError("pca: eigendecomposition failed");

  PcaResult out;
  const Eigen::VectorXd values = solver.eigenvalues().reverse();
  const Eigen::MatrixXd vectors = solver.eigenvectors().rowwise().reverse();
  const double scale = std::max(values.size() ? std::abs(values(0)) : 0.0, 1.0);
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double v = std::max(values(i), 0.0);
    out.eigenvalues.push_back(v);
    if (v > 1e-12 * scale) ++out.rank;
  }
  const std::size_t kept = std::min({dims, out.rank, d});
  if (kept < dims)
    std::cerr << "warning: pca covariance has rank " << out.rank << ", zero-filling "
              << dims - kept << " component(s)\n";

  out.projection = Tensor({n, dims});
  if (kept > 0) {
    const Eigen::MatrixXd proj = x * vectors.leftCols(static_cast<Eigen::Index>(kept));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < kept; ++c) out.projection(r, c) = proj(r, c);
    const Eigen::MatrixXd recon = proj * vectors.leftCols(static_cast<Eigen::Index>(kept)).transpose();
    out.reconstruction_error = (x - recon).squaredNorm() / static_cast<double>(n);
  } else {
    out.reconstruction_error = x.squaredNorm() / static_cast<double>(n);
  }
  return out;
}

std::string format_number(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

void export_embeddings(const std::filesystem::path& path, std::span<const std::int64_t> ids,
                       const Tensor& coords, std::span<const int> labels) {
  const std::size_t n = ids.size();
  if (labels.size() != n || (n > 0 && coords.rows() != n))
    throw ContractError("export_embeddings: ids, coordinates and labels differ in length");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "id";
  const std::size_t d = n > 0 ? coords.cols() : 0;
  for (std::size_t c = 0; c < d; ++c) out << ",x" << c;
  out << ",label\n";
  for (std::size_t r = 0; r < n; ++r) {
    out << ids[r];
    for (double v : coords.row(r)) out << ',' << format_number(v);
    out << ',' << labels[r] << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_pr_curve_csv(const std::filesystem::path& path, std::span<const PrPoint> curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "recall,precision\n";
  for (const auto& p : curve) out << format_number(p.recall) << ',' << format_number(p.precision) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace ncd
