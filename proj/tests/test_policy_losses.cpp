#include <cmath>
#include <random>

#include "doctest.h"
#include "ncd/errors.hpp"
#include "ncd/policy_losses.hpp"

using namespace ncd;
using namespace ncd::num;

TEST_CASE("epsilon schedule") {
  CHECK(epsilon(0, 100, 0.1) == 1.0);
  CHECK(std::abs(epsilon(100, 100, 0.1) - 0.1) <= 1e-12);
  CHECK(std::abs(epsilon(50, 100, 0.1) - 0.55) <= 1e-12);
  CHECK(epsilon(500, 100, 0.1) == 0.1);
  double prev = 2.0;
  for (int s = 0; s <= 120; ++s) {
    const double e = epsilon(s, 100, 0.2);
    CHECK(e <= prev);
    CHECK(e >= 0.2);
    prev = e;
  }
}

TEST_CASE("greedy selection") {
  Rng rng(1, "test");
  const double probs[] = {0.1, 0.6, 0.3};
  for (int i = 0; i < 100; ++i) CHECK(select_class(probs, 0.0, rng) == 1);
  const double tied[] = {0.4, 0.2, 0.4};
  CHECK(argmax(tied) == 0);
  CHECK(select_class(tied, 0.0, rng) == 0);

  const double four[] = {0.7, 0.1, 0.1, 0.1};
  std::vector<int> counts(4);
  for (int i = 0; i < 10000; ++i) ++counts[select_class(four, 1.0, rng)];
  for (int c : counts) {
    CHECK(c >= 2300);
    CHECK(c <= 2700);
  }

  Rng a(2, "x"), b(2, "x");
  for (int i = 0; i < 50; ++i) CHECK(select_class(four, 0.5, a) == select_class(four, 0.5, b));
}

TEST_CASE("reward") {
  CHECK(reward(3, 3) == 1);
  CHECK(reward(3, 5) == 0);
  const std::size_t chosen[] = {1, 2, 2, 0}, refs[] = {1, 2, 0, 0};
  int total = 0;
  for (int i = 0; i < 4; ++i) total += reward(chosen[i], refs[i]);
  CHECK(total == 3);
}

TEST_CASE("td loss") {
  CHECK(loss_td(0.7, 1) == doctest::Approx(0.045));
  CHECK(loss_td(1.0, 1) == 0.0);
  CHECK(loss_td(1.0, 0) == 0.5);
  CHECK(loss_td(0.5, 1) == 0.125);

  const Var q = Var::constant(Tensor({3, 1}, std::vector<double>{1.0, 0.5, 0.2}));
  const std::size_t rows[] = {0, 1};
  const int rewards[] = {0, 1};
  CHECK(std::abs(loss_td(q, rows, rewards).item() - (0.5 + 0.125) / 2.0) <= 1e-15);
  CHECK(loss_td(q, {}, {}).item() == 0.0);
}

TEST_CASE("cross entropy") {
  const Var half = Var::constant(Tensor::matrix({{0.5, 0.5}}));
  const std::optional<std::size_t> l0[] = {0};
  CHECK(std::abs(loss_ce(half, l0).item() - std::log(2.0)) <= 1e-12);

  const Var hot = Var::constant(Tensor::matrix({{1.0, 0.0}}));
  CHECK(loss_ce(hot, l0).item() <= 1e-12);

  const Var two = Var::constant(Tensor::matrix({{0.25, 0.75}, {0.9, 0.1}}));
  const std::optional<std::size_t> mixed[] = {1, std::nullopt};
  CHECK(std::abs(loss_ce(two, mixed).item() + std::log(0.75)) <= 1e-12);
  const std::optional<std::size_t> none[] = {std::nullopt, std::nullopt};
  CHECK(loss_ce(two, none).item() == 0.0);

  Parameter p("p", Tensor::matrix({{0.2, 0.7, 0.1}, {0.3, 0.3, 0.4}}));
  Parameter* ps[] = {&p};
  const std::optional<std::size_t> labels[] = {1, 2};
  CHECK(finite_difference_check([&] { return loss_ce(p.var, labels); }, ps) <= 1e-5);
}

TEST_CASE("contrastive loss closed forms") {
  const Var one = Var::constant(Tensor::matrix({{0.3, -0.4}}));
  CHECK(std::abs(loss_ss(one, one).item()) <= 1e-15);

  const Var e = Var::constant(Tensor::identity(2));
  const double want = -std::log(std::exp(0.5) / (std::exp(0.5) + 1.0));
  CHECK(std::abs(loss_ss(e, e).item() - want) <= 1e-12);
  CHECK(std::abs(loss_ss(e, e).item() - 0.474077) <= 1e-6);

  const Var swapped = Var::constant(Tensor::matrix({{0, 1}, {1, 0}}));
  CHECK(loss_ss(e, swapped).item() > loss_ss(e, e).item());

  const Var e3 = Var::constant(Tensor::identity(3));
  const Var perm = Var::constant(Tensor::matrix({{0, 1, 0}, {0, 0, 1}, {1, 0, 0}}));
  CHECK(loss_ss(e3, perm).item() > loss_ss(e3, e3).item());

  CHECK_THROWS_AS(loss_ss(e, Var::constant(Tensor({3, 2}, 1.0))), DimensionError);
  CHECK_THROWS_AS(loss_ss(e, Var::constant(Tensor::matrix({{1, 0}, {0, 0}}))), DegenerateVectorError);
}

TEST_CASE("contrastive loss gradient") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor a({3, 4}), b({3, 4});
  for (auto& x : a.data()) x = n(gen);
  for (auto& x : b.data()) x = n(gen);
  Parameter pa("a", a), pb("b", b);
  Parameter* ps[] = {&pa, &pb};
  CHECK(finite_difference_check([&] { return loss_ss(pa.var, pb.var, 2.0); }, ps) <= 1e-5);
  CHECK(finite_difference_check([&] { return loss_ss(pa.var, pb.var, 0.5); }, ps) <= 1e-5);
}

TEST_CASE("total loss and switches") {
  const Var z = Var::constant(Tensor::scalar(0.0));
  CHECK(total_loss(z, z, z, {}).value.item() == 0.0);

  const Var a = Var::constant(Tensor::scalar(0.1));
  const Var b = Var::constant(Tensor::scalar(0.2));
  const Var c = Var::constant(Tensor::scalar(0.3));
  const TotalLoss all = total_loss(a, b, c, {});
  CHECK(std::abs(all.value.item() - 0.6) <= 1e-15);
  CHECK(all.breakdown.l_td == 0.1);
  CHECK(all.breakdown.l_ce == 0.2);
  CHECK(all.breakdown.l_ss == 0.3);

  const TotalLoss no_td = total_loss(a, b, c, {false, true, true});
  CHECK(no_td.breakdown.l_td == 0.0);
  CHECK(std::abs(no_td.value.item() - 0.5) <= 1e-15);
  const TotalLoss ce_only = total_loss(a, b, c, {false, true, false});
  CHECK(ce_only.value.item() == 0.2);
  CHECK(ce_only.breakdown.l_ss == 0.0);
}
