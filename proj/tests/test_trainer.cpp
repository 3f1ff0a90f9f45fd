#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ncd/errors.hpp"
#include "ncd/trainer.hpp"

using namespace ncd;
using num::Tensor;

namespace {

GeneratorConfig tiny_data(int labeled = 2, int novel = 2, std::uint64_t seed = 3) {
  GeneratorConfig g;
  g.num_labeled_classes = labeled;
  g.num_novel_classes = novel;
  g.samples_per_class = 20;
  g.latent_dim = 4;
  g.modality_dims = {4, 3, 5};
  g.seed = seed;
  return g;
}

TrainConfig tiny_train(int pretrain = 2, int train = 3) {
  TrainConfig t;
  t.pretrain_epochs = pretrain;
  t.train_epochs = train;
  t.feature_dim = 16;
  t.heads = 2;
  t.seed = 5;
  return t;
}

std::vector<Tensor> snapshot(const Model& m) {
  std::vector<Tensor> out;
  for (const auto* p : m.parameters()) out.push_back(p->value());
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "ncd_test_trainer";
  std::filesystem::create_directories(dir);
  return dir / name;
}

bool same_losses(const LossBreakdown& a, const LossBreakdown& b) {
  return a.l_td == b.l_td && a.l_ce == b.l_ce && a.l_ss == b.l_ss && a.total == b.total;
}

double labeled_accuracy(const Trainer& tr, const Dataset& ds) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.samples()[i].label.kind == LabelKind::kGroundTruth) idx.push_back(i);
  const auto batch = make_batch(ds.samples(), ds.modalities(), idx);
  const Tensor probs = tr.model().forward(batch).probs.value();
  std::size_t hits = 0;
  for (std::size_t r = 0; r < idx.size(); ++r)
    hits += argmax(probs.row(r)) == static_cast<std::size_t>(ds.samples()[idx[r]].label.label);
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

}  // namespace

TEST_CASE("pre-training separates labeled classes") {
  const Dataset ds = generate_dataset(tiny_data(2, 0));
  Trainer tr(tiny_train(10, 0), ds.training_view());
  const auto records = tr.pretrain();
  REQUIRE(records.size() == 10);
  CHECK(records.back().mean_losses.l_ce <= records.front().mean_losses.l_ce);
  CHECK(labeled_accuracy(tr, ds) >= 0.95);
  CHECK(tr.finished());
  CHECK(records.front().epsilon == 0.0);
}

TEST_CASE("zero pre-training epochs leave the model untouched") {
  const Dataset ds = generate_dataset(tiny_data());
  Trainer tr(tiny_train(0, 1), ds.training_view());
  const auto before = snapshot(tr.model());
  CHECK(tr.pretrain().empty());
  CHECK(snapshot(tr.model()) == before);
}

TEST_CASE("iteration and epoch bookkeeping") {
  const Dataset ds = generate_dataset(tiny_data());
  Trainer tr(tiny_train(1, 2), ds.training_view());
  std::vector<IterationRecord> its;
  TrainCallbacks cb;
  cb.on_iteration = [&](const IterationRecord& r) { its.push_back(r); };
  const auto records = tr.run(cb);
  REQUIRE(records.size() == 3);
  CHECK(records[0].phase == Phase::kPretrain);
  CHECK(records[1].phase == Phase::kTrain);
  CHECK(records[2].epoch == 2);
  // 40 labeled samples in batches of 8, then 80 samples per train epoch.
  CHECK(its.size() == 5 + 2 * 10);
  CHECK(tr.total_train_iterations() == 20);
  CHECK(tr.train_iterations_done() == 20);
  CHECK(its[5].epsilon == 1.0);
  CHECK(its.back().epsilon < its[6].epsilon);
  for (std::size_t i = 0; i < its.size(); ++i) CHECK(its[i].iteration == static_cast<std::int64_t>(i));
  CHECK(tr.calibrated_params().has_value());
  CHECK(records[2].stlclu.has_value());
  CHECK_THROWS_AS(tr.run_epoch(), ContractError);
}

TEST_CASE("unlabeled samples do not reach the gradients without td, ss and pseudo-labels") {
  const Dataset ds = generate_dataset(tiny_data());
  auto samples = ds.samples();
  for (auto& s : samples)
    if (s.label.kind != LabelKind::kGroundTruth)
      for (auto& m : s.modalities)
        for (auto& x : *m) x = -3.0 * x + 1.0;
  const Dataset other = ds.with_samples(samples);

  TrainConfig t = tiny_train(1, 2);
  t.losses = {false, true, false};
  t.stlclu = false;
  Trainer a(t, ds.training_view()), b(t, other.training_view());
  a.run();
  b.run();
  CHECK(snapshot(a.model()) == snapshot(b.model()));
}

TEST_CASE("same seed, same trajectory") {
  const Dataset ds = generate_dataset(tiny_data());
  Trainer a(tiny_train(), ds.training_view()), b(tiny_train(), ds.training_view());
  const auto ra = a.run(), rb = b.run();
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    CHECK(same_losses(ra[i].mean_losses, rb[i].mean_losses));
    CHECK(ra[i].coverage == rb[i].coverage);
  }
  CHECK(snapshot(a.model()) == snapshot(b.model()));
  CHECK(a.store() == b.store());
}

TEST_CASE("pseudo-label invariants hold across a run") {
  const Dataset ds = generate_dataset(tiny_data());
  Trainer tr(tiny_train(3, 6), ds.training_view());
  std::map<std::int64_t, int> seen;
  double coverage = 0.0;
  TrainCallbacks cb;
  cb.evaluate = [&](const Model&, const PseudoLabelStore& store) -> std::optional<EvalSnapshot> {
    for (const auto& [id, label] : seen) CHECK(store.get(id) == std::optional<int>(label));
    for (const auto& [id, label] : store.entries()) {
      CHECK(label >= 2);
      seen[id] = label;
    }
    return std::nullopt;
  };
  for (const auto& r : tr.run(cb)) {
    CHECK(r.coverage >= coverage);
    coverage = r.coverage;
    CHECK_FALSE(r.eval.has_value());
  }
  for (const auto& [id, label] : tr.store().entries()) {
    const auto& s = *std::find_if(ds.samples().begin(), ds.samples().end(),
                                  [id = id](const auto& x) { return x.id == id; });
    CHECK(s.label.kind != LabelKind::kGroundTruth);
  }
}

TEST_CASE("checkpoint round trip is byte-identical") {
  const Dataset ds = generate_dataset(tiny_data());
  Trainer tr(tiny_train(1, 2), ds.training_view());
  tr.run_epoch();
  tr.run_epoch();
  const auto p1 = scratch("a.ckpt"), p2 = scratch("b.ckpt");
  tr.save_checkpoint(p1);
  const Trainer back = Trainer::load_checkpoint(p1, ds.training_view());
  back.save_checkpoint(p2);
  CHECK(read_file(p1) == read_file(p2));
  CHECK(back.store() == tr.store());
  CHECK(back.completed_train_epochs() == 1);
  CHECK(back.calibrated_params() == tr.calibrated_params());
  CHECK(snapshot(back.model()) == snapshot(tr.model()));
}

TEST_CASE("resume reproduces the uninterrupted run") {
  const Dataset ds = generate_dataset(tiny_data());
  Trainer full(tiny_train(2, 4), ds.training_view());
  const auto want = full.run();

  Trainer first(tiny_train(2, 4), ds.training_view());
  for (int i = 0; i < 4; ++i) first.run_epoch();
  const auto path = scratch("resume.ckpt");
  first.save_checkpoint(path);
  const TrainConfig expected = tiny_train(2, 4);
  Trainer resumed = Trainer::load_checkpoint(path, ds.training_view(), &expected);
  const auto rest = resumed.run();
  REQUIRE(rest.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(same_losses(rest[i].mean_losses, want[4 + i].mean_losses));
    CHECK(rest[i].reward_mean == want[4 + i].reward_mean);
    CHECK(rest[i].coverage == want[4 + i].coverage);
  }
  CHECK(snapshot(resumed.model()) == snapshot(full.model()));
  CHECK(resumed.store() == full.store());
}

TEST_CASE("incompatible or damaged checkpoints are rejected") {
  const Dataset ds = generate_dataset(tiny_data());
  Trainer tr(tiny_train(1, 1), ds.training_view());
  tr.run_epoch();
  const auto path = scratch("c.ckpt");
  tr.save_checkpoint(path);

  auto wider = tiny_data();
  wider.modality_dims = {4, 3, 6};
  const Dataset other = generate_dataset(wider);
  CHECK_THROWS_AS(Trainer::load_checkpoint(path, other.training_view()), IncompatibilityError);
  TrainConfig changed = tiny_train(1, 1);
  changed.feature_dim = 8;
  CHECK_THROWS_AS(Trainer::load_checkpoint(path, ds.training_view(), &changed), IncompatibilityError);

  const std::string bytes = read_file(path);
  const auto cut = scratch("cut.ckpt");
  std::ofstream(cut, std::ios::binary) << bytes.substr(0, bytes.size() - 100);
  CHECK_THROWS_AS(Trainer::load_checkpoint(cut, ds.training_view()), ParseError);
  std::ofstream(cut, std::ios::binary) << bytes << "x";
  CHECK_THROWS_AS(Trainer::load_checkpoint(cut, ds.training_view()), ParseError);
  std::ofstream(cut, std::ios::binary) << "garbage\n";
  CHECK_THROWS_AS(Trainer::load_checkpoint(cut, ds.training_view()), ParseError);
  CHECK_THROWS_AS(Trainer::load_checkpoint(scratch("missing.ckpt"), ds.training_view()), IoError);
  std::filesystem::remove_all(path.parent_path());
}

TEST_CASE("config validation") {
  const Dataset ds = generate_dataset(tiny_data());
  TrainConfig t = tiny_train();
  t.batch_size = 0;
  CHECK_THROWS_AS(Trainer(t, ds.training_view()), ConfigError);
  t = tiny_train();
  t.eps_min = 1.5;
  CHECK_THROWS_AS(Trainer(t, ds.training_view()), ConfigError);
  t = tiny_train();
  t.pseudo_slots = -1;
  CHECK_THROWS_AS(Trainer(t, ds.training_view()), ConfigError);
}
