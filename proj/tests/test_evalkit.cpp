#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "ncd/errors.hpp"
#include "ncd/evalkit.hpp"
#include "oracles.hpp"

using namespace ncd;
using num::Tensor;

namespace {

RankedQuery query_from(const std::vector<int>& rel, int cls = 0) {
  RankedQuery q;
  q.query_class = cls;
  for (std::size_t i = 0; i < rel.size(); ++i) {
    q.ranked_ids.push_back(static_cast<std::int64_t>(i));
    q.relevant.push_back(static_cast<char>(rel[i]));
  }
  return q;
}

RankedRetrievalRun run_of(std::initializer_list<std::vector<int>> rels) {
  RankedRetrievalRun run;
  for (const auto& r : rels) run.queries.push_back(query_from(r));
  return run;
}

std::vector<int> random_relevance(std::mt19937_64& gen) {
  std::uniform_int_distribution<int> len(1, 20);
  std::bernoulli_distribution coin(0.35);
  std::vector<int> rel(static_cast<std::size_t>(len(gen)));
  for (auto& r : rel) r = coin(gen);
  if (std::count(rel.begin(), rel.end(), 1) == 0) rel[gen() % rel.size()] = 1;
  return rel;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("build_run ranking") {
  LabeledFeatures q{Tensor::matrix({{1, 0}}), {100}, {0}};
  LabeledFeatures t{Tensor::matrix({{0, 1}, {2, 0}, {1, 1}, {3, 3}}), {5, 9, 7, 2}, {1, 0, 0, 1}};
  const auto run = build_run(q, t);
  REQUIRE(run.queries.size() == 1);
  const auto& r = run.queries[0];
  CHECK(r.query_id == 100);
  CHECK(r.ranked_ids == std::vector<std::int64_t>{9, 2, 7, 5});
  CHECK(r.relevant == std::vector<char>{1, 0, 1, 0});
  CHECK(r.relevant_total() == 2);

  LabeledFeatures bad{Tensor::matrix({{1, 0, 0}}), {1}, {0}};
  CHECK_THROWS_AS(build_run(bad, t), DimensionError);
  LabeledFeatures zero{Tensor::matrix({{0, 0}}), {1}, {0}};
  CHECK_THROWS_AS(build_run(zero, t), DegenerateVectorError);
}

TEST_CASE("build_run agrees with a direct cosine sort") {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor qf({1, 3}), tf({5, 3});
    for (auto& x : qf.data()) x = n(gen);
    for (auto& x : tf.data()) x = n(gen);
    std::vector<std::int64_t> ids = {40, 10, 30, 20, 50};
    const auto run = build_run({qf, {0}, {0}}, {tf, ids, {0, 1, 0, 1, 0}});
    std::vector<std::pair<double, std::int64_t>> sims;
    for (std::size_t i = 0; i < 5; ++i) {
      double dot = 0, a = 0, b = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        dot += qf(0, k) * tf(i, k);
        a += qf(0, k) * qf(0, k);
        b += tf(i, k) * tf(i, k);
      }
      sims.emplace_back(-dot / std::sqrt(a * b), ids[i]);
    }
    std::sort(sims.begin(), sims.end());
    for (std::size_t i = 0; i < 5; ++i) CHECK(run.queries[0].ranked_ids[i] == sims[i].second);
  }
}

TEST_CASE("nn metric") {
  CHECK(nn_metric(run_of({{1, 0}, {1, 1}})) == 1.0);
  CHECK(nn_metric(run_of({{0, 0}, {0, 0}})) == 0.0);
  CHECK(nn_metric(run_of({{1, 0}, {0, 1}})) == 0.5);
}

TEST_CASE("map metric") {
  CHECK(std::abs(map_metric(run_of({{1, 0, 1}})) - 5.0 / 6.0) <= 1e-15);
  CHECK(map_metric(run_of({{1, 1, 0, 0}})) == 1.0);
  CHECK(std::abs(map_metric(run_of({{0, 0, 0, 1, 0}})) - 0.25) <= 1e-15);
  CHECK_THROWS_AS(map_metric(run_of({{0, 0}})), ProtocolError);
}

TEST_CASE("ndcg") {
  CHECK(ndcg_at(run_of({{1, 1, 0}})) == 1.0);
  CHECK(ndcg_at(run_of({{0, 0, 1}}), 2) == 0.0);
  CHECK(std::abs(ndcg_at(run_of({{0, 1}}), 2) - 1.0 / std::log2(3.0)) <= 1e-12);
  CHECK(std::abs(ndcg_at(run_of({{0, 1}}), 2) - 0.63093) <= 1e-5);
}

TEST_CASE("anmrr") {
  CHECK(anmrr(run_of({{1, 1, 0, 0, 0, 0, 0, 0, 0, 0}})) == 0.0);
  // NG = 1, K = 2: the relevant item sits beyond K.
  CHECK(std::abs(anmrr(run_of({{0, 0, 0, 1}})) - 1.0) <= 1e-12);
  CHECK(std::abs(anmrr(run_of({{0, 0, 0, 0, 0, 0, 1, 1}})) - 1.0) <= 1e-12);
  CHECK_THROWS_AS(anmrr(run_of({{0, 0}})), ProtocolError);
}

TEST_CASE("pr curve") {
  const auto perfect = pr_curve(run_of({{1, 1, 0, 0}}));
  REQUIRE(perfect.size() == 101);
  for (const auto& p : perfect) CHECK(p.precision == 1.0);
  const auto curve = pr_curve(run_of({{1, 0, 1}}));
  CHECK(std::abs(curve.back().precision - 2.0 / 3.0) <= 1e-15);
  CHECK(curve.front().precision == 1.0);
  CHECK(curve[50].recall == 0.5);
}

TEST_CASE("metrics match brute-force oracles") {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 200; ++trial) {
    RankedRetrievalRun run;
    std::vector<std::vector<int>> rels;
    const int nq = 1 + static_cast<int>(gen() % 4);
    for (int i = 0; i < nq; ++i) {
      rels.push_back(random_relevance(gen));
      run.queries.push_back(query_from(rels.back()));
    }
    int max_ng = 0;
    for (const auto& r : rels) max_ng = std::max(max_ng, static_cast<int>(std::count(r.begin(), r.end(), 1)));
    double ap = 0, nn = 0, nd = 0, nm = 0;
    std::vector<double> pr(101, 0.0);
    for (const auto& r : rels) {
      ap += oracle::average_precision(r);
      nn += r[0];
      nd += oracle::ndcg(r, 100);
      nm += oracle::nmrr(r, max_ng);
      for (int i = 0; i <= 100; ++i) pr[i] += oracle::interpolated_precision(r, i / 100.0);
    }
    CHECK(std::abs(map_metric(run) - ap / nq) <= 1e-9);
    CHECK(std::abs(nn_metric(run) - nn / nq) <= 1e-9);
    CHECK(std::abs(ndcg_at(run) - nd / nq) <= 1e-9);
    CHECK(std::abs(anmrr(run) - nm / nq) <= 1e-9);
    const auto curve = pr_curve(run);
    for (int i = 0; i <= 100; ++i) CHECK(std::abs(curve[i].precision - pr[i] / nq) <= 1e-9);
    for (int i = 1; i <= 100; ++i) CHECK(curve[i].precision <= curve[i - 1].precision + 1e-15);
    const auto m = retrieval_metrics(run);
    CHECK(m.anmrr >= 0.0);
    CHECK(m.anmrr <= 1.0);
  }
}

TEST_CASE("promoting a relevant item never hurts") {
  for (int mask = 1; mask < 32; ++mask) {
    std::vector<int> rel(5);
    for (int i = 0; i < 5; ++i) rel[i] = (mask >> i) & 1;
    for (int i = 1; i < 5; ++i) {
      if (!rel[i] || rel[i - 1]) continue;
      auto better = rel;
      std::swap(better[i], better[i - 1]);
      const auto a = run_of({rel}), b = run_of({better});
      CHECK(map_metric(b) >= map_metric(a));
      CHECK(nn_metric(b) >= nn_metric(a));
      CHECK(ndcg_at(b) >= ndcg_at(a));
      CHECK(anmrr(b) <= anmrr(a));
    }
  }
}

TEST_CASE("ncd accuracy") {
  const std::vector<int> truth = {0, 0, 1, 1, 2, 2};
  CHECK(ncd_accuracy(std::vector<int>{5, 5, 3, 3, 9, 9}, truth) == 1.0);
  CHECK(ncd_accuracy(std::vector<int>{1, 1, 1, 1}, std::vector<int>{0, 0, 1, 1}) == 0.5);
  CHECK(ncd_accuracy(std::vector<int>{-1, -1, 3, 3, 9, 9}, truth) == doctest::Approx(4.0 / 6.0));

  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + gen() % 12;
    const int classes = 1 + static_cast<int>(gen() % 4), clusters = 1 + static_cast<int>(gen() % 5);
    std::vector<int> pred(n), tr(n);
    for (auto& p : pred) p = static_cast<int>(gen() % (clusters + 1)) - 1;
    for (auto& t : tr) t = static_cast<int>(gen() % classes);
    CHECK(std::abs(ncd_accuracy(pred, tr) - oracle::matched_accuracy(pred, tr)) <= 1e-12);
  }
}

TEST_CASE("pca") {
  Tensor axis({4, 2});
  const double xs[] = {-2, -2, 2, 2}, ys[] = {-0.5, 0.5, -0.5, 0.5};
  for (std::size_t i = 0; i < 4; ++i) {
    axis(i, 0) = xs[i];
    axis(i, 1) = ys[i];
  }
  const auto res = pca_project(axis, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(std::abs(res.projection(i, 0)) - std::abs(xs[i])) <= 1e-9);
    CHECK(std::abs(std::abs(res.projection(i, 1)) - std::abs(ys[i])) <= 1e-9);
  }

  std::mt19937_64 gen(2);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor x({40, 5});
  for (std::size_t r = 0; r < 40; ++r)
    for (std::size_t c = 0; c < 5; ++c) x(r, c) = n(gen) * static_cast<double>(5 - c);
  const auto p = pca_project(x, 2);
  double v0 = 0, v1 = 0;
  for (std::size_t r = 0; r < 40; ++r) {
    v0 += p.projection(r, 0) * p.projection(r, 0);
    v1 += p.projection(r, 1) * p.projection(r, 1);
  }
  CHECK(v0 >= v1);
  CHECK(p.rank == 5);
  CHECK(std::is_sorted(p.eigenvalues.rbegin(), p.eigenvalues.rend()));
  const double discarded = p.eigenvalues[2] + p.eigenvalues[3] + p.eigenvalues[4];
  CHECK(std::abs(p.reconstruction_error - discarded) <= 1e-8);

  Tensor line({4, 3});
  for (std::size_t r = 0; r < 4; ++r) line(r, 0) = static_cast<double>(r);
  const auto low = pca_project(line, 2);
  CHECK(low.rank == 1);
  for (std::size_t r = 0; r < 4; ++r) CHECK(low.projection(r, 1) == 0.0);
  CHECK_THROWS_AS(pca_project(line, 5), ContractError);
}

TEST_CASE("csv export") {
  const auto dir = std::filesystem::temp_directory_path() / "ncd_test_evalkit";
  std::filesystem::create_directories(dir);
  const std::int64_t ids[] = {3, 4};
  const int labels[] = {1, -1};
  export_embeddings(dir / "e.csv", ids, Tensor::matrix({{0.5, 1.0 / 3.0}, {-2, 1e-7}}), labels);
  CHECK(read_file(dir / "e.csv") == "id,x0,x1,label\n3,0.5,0.333333,1\n4,-2,1e-07,-1\n");
  CHECK_THROWS_AS(export_embeddings(dir / "f.csv", ids, Tensor::matrix({{1, 2}}), labels), ContractError);

  const PrPoint pts[] = {{0.0, 1.0}, {1.0, 0.25}};
  write_pr_curve_csv(dir / "pr.csv", pts);
  CHECK(read_file(dir / "pr.csv") == "recall,precision\n0,1\n1,0.25\n");
  std::filesystem::remove_all(dir);
}
