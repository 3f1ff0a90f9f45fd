#include <cmath>
#include <random>

#include "doctest.h"
#include "ncd/agents.hpp"
#include "ncd/errors.hpp"
#include "ncd/policy_losses.hpp"

using namespace ncd;
using namespace ncd::num;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = u(gen);
  return t;
}

ModelConfig small_model(std::size_t classes = 3) {
  ModelConfig c;
  c.modality_dims = {3, 2, 4};
  c.feature_dim = 8;
  c.heads = 2;
  c.num_classes = classes;
  return c;
}

void set_identity(AttentionBlock& b) {
  const std::size_t d = b.wq.value().rows();
  for (auto* p : {&b.wq, &b.wk, &b.wv, &b.wo}) p->value() = Tensor::identity(d);
  b.bo.value().fill(0.0);
}

}  // namespace

TEST_CASE("member encoder") {
  Rng rng(1, "test");
  MemberAgent m(0, 3, 8, rng);
  CHECK(encode(m, std::nullopt, 8) == Tensor({8}));
  const ModalityVector x = std::vector<double>{0.5, -1.0, 2.0};
  CHECK(encode(m, x, 8) == encode(m, x, 8));
  CHECK(encode(m, x, 8) != Tensor({8}));
  CHECK_THROWS_AS(encode(m, std::vector<double>{1.0}, 8), DimensionError);

  for (auto* p : {&m.w1, &m.b1, &m.w2, &m.b2}) p->value().fill(0.0);
  CHECK(encode(m, x, 8) == Tensor({8}));
}

TEST_CASE("masked rows are exact zeros in a batch") {
  Rng rng(2, "test");
  MemberAgent m(1, 2, 4, rng);
  const double present[] = {1.0, 0.0, 1.0};
  const Tensor out = m.encode(Var::constant(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}})), present).value();
  for (double v : out.row(1)) CHECK(v == 0.0);
  CHECK(out(0, 0) != 0.0);
}

TEST_CASE("grouping pads odd counts with zeros") {
  auto feats = [](std::size_t m) {
    std::vector<Var> v;
    for (std::size_t i = 0; i < m; ++i) v.push_back(Var::constant(Tensor({2, 3}, static_cast<double>(i + 1))));
    return v;
  };
  auto [a4, b4] = group_features(feats(4));
  CHECK(a4.size() == 2);
  CHECK(b4.size() == 2);
  CHECK(a4[1].value()[0] == 3.0);

  auto [a3, b3] = group_features(feats(3));
  CHECK(a3.size() == 2);
  CHECK(b3.size() == 2);
  CHECK(b3[1].value() == Tensor({2, 3}));

  auto [a1, b1] = group_features(feats(1));
  CHECK(a1.size() == 1);
  REQUIRE(b1.size() == 1);
  CHECK(b1[0].value() == Tensor({2, 3}));
  CHECK_THROWS_AS(group_features({}), ContractError);
}

TEST_CASE("single token attention with identity projections") {
  Rng rng(3, "test");
  AttentionBlock block("b", 4, 2, rng);
  set_identity(block);
  const Var tok = Var::constant(Tensor::matrix({{1, -2, 3, 0.5}}));
  const Var toks[] = {tok};
  Tensor w;
  const Tensor out = block.fuse(toks, &w).value();
  CHECK(out == tok.value());
  REQUIRE(w.size() == 2);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == 1.0);
}

TEST_CASE("identical tokens share attention evenly") {
  Rng rng(4, "test");
  std::mt19937_64 gen(4);
  AttentionBlock block("b", 4, 2, rng);
  const Var tok = Var::constant(random_tensor({3, 4}, gen));
  const Var toks[] = {tok, tok};
  Tensor w;
  const Tensor out = block.fuse(toks, &w).value();
  for (double x : w.data()) CHECK(x == 0.5);
  const Var one[] = {tok};
  const Tensor single = block.fuse(one).value();
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - single[i]) <= 1e-12);
}

TEST_CASE("final fusion of equal inputs") {
  Model model(small_model(), 5);
  std::mt19937_64 gen(5);
  const Var a = Var::constant(random_tensor({2, 8}, gen));
  Tensor w;
  const Tensor out = fuse_final(model.leader(), a, a, &w).value();
  for (double x : w.data()) CHECK(x == 0.5);
  CHECK(out == fuse_final(model.leader(), a, a).value());

  Parameter pa("a", random_tensor({2, 8}, gen)), pb("b", random_tensor({2, 8}, gen));
  Parameter* ps[] = {&pa, &pb};
  CHECK(finite_difference_check([&] { return sum(square(fuse_final(model.leader(), pa.var, pb.var))); }, ps) <=
        1e-5);
  backward(sum(square(fuse_final(model.leader(), pa.var, pb.var))));
  double ga = 0.0, gb = 0.0;
  for (double g : pa.gradient().data()) ga += std::abs(g);
  for (double g : pb.gradient().data()) gb += std::abs(g);
  CHECK(ga > 0.0);
  CHECK(gb > 0.0);
}

TEST_CASE("class and q heads") {
  Model model(small_model(4), 6);
  std::mt19937_64 gen(6);
  const Var act = Var::constant(random_tensor({5, 8}, gen));
  const Tensor p = classify(model.heads(), act).value();
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0.0;
    for (double v : p.row(r)) total += v;
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
  const Tensor q = q_value(model.heads(), act).value();
  for (double v : q.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }

  const auto before = argmax(p.row(0));
  for (auto& b : model.heads().class_b.value().data()) b += 7.5;
  CHECK(argmax(classify(model.heads(), act).value().row(0)) == before);

  for (auto* prm : {&model.heads().class_w, &model.heads().class_b, &model.heads().q_w, &model.heads().q_b})
    prm->value().fill(0.0);
  const Tensor uniform = classify(model.heads(), act).value();
  for (double v : uniform.data()) CHECK(std::abs(v - 0.25) <= 1e-15);
  const Tensor half = q_value(model.heads(), act).value();
  for (double v : half.data()) CHECK(v == 0.5);

  Parameter* ps[] = {&model.heads().q_w, &model.heads().q_b};
  for (auto* prm : ps)
    for (auto& v : prm->value().data()) v = 0.3;
  const std::size_t rows[] = {0, 2, 4};
  const int rewards[] = {1, 0, 1};
  CHECK(finite_difference_check([&] { return loss_td(q_value(model.heads(), act), rows, rewards); }, ps) <= 1e-5);
}

TEST_CASE("model forward shapes and determinism") {
  const auto cfg = small_model();
  Model a(cfg, 7), b(cfg, 7), c(cfg, 8);
  std::vector<MultiModalSample> samples(3);
  std::mt19937_64 gen(7);
  for (std::size_t i = 0; i < 3; ++i) {
    samples[i].id = static_cast<std::int64_t>(i);
    for (auto d : cfg.modality_dims) samples[i].modalities.push_back(random_tensor({d}, gen).values());
  }
  samples[1].modalities[2].reset();
  const std::vector<ModalitySpec> specs = {{0, 3}, {1, 2}, {2, 4}};
  const std::size_t idx[] = {0, 1, 2};
  const BatchInput batch = make_batch(samples, specs, idx);
  CHECK(batch.present[2][1] == 0.0);

  const ForwardPass fa = a.forward(batch);
  CHECK(fa.action.shape() == Shape{3, 8});
  CHECK(fa.probs.shape() == Shape{3, 3});
  CHECK(fa.q.shape() == Shape{3, 1});
  CHECK(fa.member_features.size() == 3);
  for (double v : fa.member_features[2].value().row(1)) CHECK(v == 0.0);
  CHECK(fa.action.value() == b.forward(batch).action.value());
  CHECK(fa.action.value() != c.forward(batch).action.value());

  const ModalityVector& x0 = samples[0].modalities[0];
  const Tensor single = encode(a.members()[0], x0, 8);
  for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(single[k] - fa.member_features[0].value()(0, k)) <= 1e-12);

  CHECK(a.parameters().size() == 3 * 4 + 3 * 5 + 4);
}

TEST_CASE("contrastive rows need a view in both groups") {
  const auto cfg = small_model();
  Model model(cfg, 3);
  std::mt19937_64 gen(3);
  BatchInput batch;
  for (auto d : cfg.modality_dims) batch.inputs.push_back(random_tensor({4, d}, gen));
  // Group a holds modalities 0 and 2, group b modality 1.
  batch.present = {{1, 0, 1, 0}, {1, 1, 0, 0}, {0, 1, 1, 0}};
  const auto pass = model.forward(batch);
  CHECK(contrastive_rows(batch, pass) == std::vector<std::size_t>{0, 1});

  // With untrained zero biases an absent group fuses to the zero vector.
  for (double x : pass.beta.value().row(2)) CHECK(x == 0.0);
  CHECK_THROWS_AS(loss_ss(pass.alpha, pass.beta), DegenerateVectorError);
}

TEST_CASE("model config validation") {
  auto c = small_model();
  c.heads = 3;
  CHECK_THROWS_AS(Model(c, 0), ConfigError);
  c = small_model();
  c.modality_dims.clear();
  CHECK_THROWS_AS(Model(c, 0), ConfigError);
}

TEST_CASE("composite network passes the gradient check") {
  ModelConfig cfg = small_model(2);
  cfg.modality_dims = {2, 3};
  cfg.feature_dim = 4;
  Model model(cfg, 9);
  std::mt19937_64 gen(9);
  BatchInput batch;
  batch.inputs = {random_tensor({2, 2}, gen), random_tensor({2, 3}, gen)};
  batch.present = {{1.0, 1.0}, {1.0, 0.0}};
  auto params = model.parameters();
  CHECK(finite_difference_check(
            [&] {
              const auto f = model.forward(batch);
              return add(sum(square(f.action)), sum(f.q));
            },
            params) <= 1e-5);
}
