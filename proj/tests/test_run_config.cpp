#include "doctest.h"
#include "ncd/errors.hpp"
#include "ncd/run_config.hpp"

using namespace ncd;

TEST_CASE("key=value parsing") {
  const auto kv = parse_key_values("a=1\n# comment\n  b = two words  # trailing\n\nc=\n");
  REQUIRE(kv.size() == 3);
  CHECK(kv[0] == std::pair<std::string, std::string>{"a", "1"});
  CHECK(kv[1] == std::pair<std::string, std::string>{"b", "two words"});
  CHECK(kv[2].second.empty());
  CHECK_THROWS_AS(parse_key_values("novalue\n"), ConfigError);
  CHECK_THROWS_AS(parse_key_values("=3\n"), ConfigError);
}

TEST_CASE("defaults") {
  const RunConfig c;
  CHECK(c.train.pretrain_epochs == 10);
  CHECK(c.train.train_epochs == 40);
  CHECK(c.train.batch_size == 8);
  CHECK(c.train.learning_rate == 1e-3);
  CHECK(c.train.weight_decay == 1e-4);
  CHECK(c.train.feature_dim == 64);
  CHECK(c.train.heads == 4);
  CHECK(c.train.tau == 2.0);
  CHECK(c.train.schedule == RelaxationSchedule{1.1, 1, 2});
  CHECK(c.data.num_labeled_classes == 8);
  CHECK(c.data.num_novel_classes == 8);
  CHECK(c.data.samples_per_class == 100);
  CHECK(c.data.modality_dims.size() == 4);
  CHECK(c.data.sigma_between / c.data.sigma_within == doctest::Approx(10.0));
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("text round trip") {
  RunConfig c;
  c.set("seed", "7");
  c.set("modality-dims", "3, 5");
  c.set("learning-rate", "0.0025");
  c.set("loss-td", "false");
  c.set("drop-modality", "1");
  c.set("cluster-cosine", "on");
  c.set("refresh-actions", "false");
  c.set("sigma-observation", "0.1");
  CHECK(c.seed() == 7);
  CHECK(c.data.seed == 7);
  CHECK(c.data.modality_dims == std::vector<std::size_t>{3, 5});
  CHECK_FALSE(c.train.losses.td);
  CHECK(c.eval.drop_modality == std::optional<std::size_t>(1));

  const RunConfig back = RunConfig::from_text(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.train == c.train);
  CHECK(back.eval == c.eval);
  CHECK(back.data.modality_dims == c.data.modality_dims);
  CHECK(TrainConfig::from_text(c.train.to_text()) == c.train);
}

TEST_CASE("bad settings") {
  RunConfig c;
  CHECK_THROWS_AS(c.set("no-such-key", "1"), ConfigError);
  CHECK_THROWS_AS(c.set("batch-size", "eight"), ConfigError);
  CHECK_THROWS_AS(c.set("learning-rate", "1e-3x"), ConfigError);
  CHECK_THROWS_AS(c.set("stlclu", "maybe"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_text("labeled-classes=3\n"), ConfigError);

  c = RunConfig{};
  c.set("heads", "5");
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.set("eps-growth", "1");
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.set("drop-probability", "1");
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.set("batch-size", "0");
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("missing config file") {
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/ncd.cfg"), IoError);
}
