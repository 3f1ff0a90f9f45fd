#include "ncd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ncd/errors.hpp"

namespace ncd {

using num::Tensor;
using num::Var;

namespace {

int head_slots(const TrainConfig& config, const TrainingView& data) {
  if (config.pseudo_slots > 0) return config.pseudo_slots;
  return std::max(1, 4 * data.num_novel_classes);
}

ModelConfig model_config(const TrainConfig& config, const TrainingView& data) {
  ModelConfig mc;
  for (const auto& m : data.modalities) mc.modality_dims.push_back(m.dim);
  mc.feature_dim = config.feature_dim;
  mc.heads = config.heads;
  mc.num_classes = static_cast<std::size_t>(data.num_labeled_classes + head_slots(config, data));
  return mc;
}

const TrainConfig& validated(const TrainConfig& config) {
  config.validate();
  return config;
}

void normalize_in_place(std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm < 1e-12) return;
  for (auto& x : v) x /= norm;
}

void add_into(LossBreakdown& acc, const LossBreakdown& x) {
  acc.l_td += x.l_td;
  acc.l_ce += x.l_ce;
  acc.l_ss += x.l_ss;
  acc.total += x.total;
}

void check_missing_are_zero(const BatchInput& batch, const ForwardPass& pass) {
  for (std::size_t j = 0; j < pass.member_features.size(); ++j) {
    const Tensor& f = pass.member_features[j].value();
    for (std::size_t r = 0; r < batch.size(); ++r) {
      if (batch.present[j][r] != 0.0) continue;
      for (double x : f.row(r))
        if (x != 0.0) throw ContractError("missing modality " + std::to_string(j) + " produced a non-zero feature");
    }
  }
}

}  // namespace

const char* phase_name(Phase phase) { return phase == Phase::kPretrain ? "pretrain" : "train"; }

void TrainConfig::validate() const {
  if (pretrain_epochs < 0) throw ConfigError("pretrain-epochs must be non-negative");
  if (train_epochs < 0) throw ConfigError("train-epochs must be non-negative");
  if (batch_size == 0) throw ConfigError("batch-size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning-rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight-decay must be non-negative");
  if (eps_min < 0.0 || eps_min > 1.0) throw ConfigError("eps-min must be in [0, 1]");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (feature_dim == 0) throw ConfigError("feature-dim must be at least 1");
  if (heads == 0 || feature_dim % heads != 0) throw ConfigError("heads must divide feature-dim");
  if (pseudo_slots < 0) throw ConfigError("pseudo-slots must be non-negative");
  schedule.validate();
}

Trainer::Trainer(const TrainConfig& config, const TrainingView& data)
    : config_(validated(config)),
      data_(data),
      model_(model_config(config_, data), config_.seed),
      greedy_rng_(config_.seed, "greedy") {
  if (data_.samples.empty()) throw ConfigError("training data is empty");
  auto params = model_.parameters();
  adam_ = Adam(params, AdamConfig{0.9, 0.999, 1e-8, config_.weight_decay});

  const int first = data_.num_labeled_classes;
  const int limit = first + head_slots(config_, data_);
  std::map<std::int64_t, int> preset;
  int next_fresh = first;
  for (std::size_t i = 0; i < data_.samples.size(); ++i) {
    const auto& s = data_.samples[i];
    if (s.label.kind == LabelKind::kGroundTruth) {
      labeled_indices_.push_back(i);
      continue;
    }
    unlabeled_indices_.push_back(i);
    ++unlabeled_count_;
    if (s.label.kind == LabelKind::kPseudo) {
      if (s.label.label >= limit)
        throw ConfigError("dataset pseudo-label " + std::to_string(s.label.label) +
                          " exceeds the class head capacity");
      preset[s.id] = s.label.label;
      next_fresh = std::max(next_fresh, s.label.label + 1);
    }
  }
  store_ = PseudoLabelStore::restore(first, limit, next_fresh, std::move(preset));
}

std::int64_t Trainer::total_train_iterations() const {
  const auto n = static_cast<std::int64_t>(data_.samples.size());
  const auto bs = static_cast<std::int64_t>(config_.batch_size);
  return static_cast<std::int64_t>(config_.train_epochs) * ((n + bs - 1) / bs);
}

bool Trainer::finished() const {
  return pretrain_done_ >= config_.pretrain_epochs && train_done_ >= config_.train_epochs;
}

std::optional<std::size_t> Trainer::reference_label(const MultiModalSample& sample) const {
  if (sample.label.kind == LabelKind::kGroundTruth)
    return static_cast<std::size_t>(sample.label.label);
  if (auto p = store_.get(sample.id)) return static_cast<std::size_t>(*p);
  return std::nullopt;
}

Tensor compute_actions(const Model& model, std::span<const MultiModalSample> samples,
                       std::span<const ModalitySpec> modalities,
                       std::span<const std::size_t> indices) {
  const std::size_t d = model.config().feature_dim;
  Tensor out({indices.size(), d});
  constexpr std::size_t kChunk = 512;
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const auto chunk = indices.subspan(start, std::min(kChunk, indices.size() - start));
    const auto pass = model.forward(make_batch(samples, modalities, chunk));
    const auto& a = pass.action.value();
    std::copy(a.data().begin(), a.data().end(), out.data().subspan(start * d).begin());
  }
  return out;
}

Tensor Trainer::infer_actions(std::span<const std::size_t> indices) const {
  return compute_actions(model_, data_.samples, data_.modalities, indices);
}

void Trainer::calibrate_on_labeled() {
  if (labeled_indices_.empty())
    throw ConfigError("pseudo-labeling needs labeled samples for calibration");
  const Tensor actions = infer_actions(labeled_indices_);
  std::vector<Point> points;
  std::vector<int> labels;
  for (std::size_t r = 0; r < labeled_indices_.size(); ++r) {
    Point p(actions.row(r).begin(), actions.row(r).end());
    if (config_.cluster_cosine) normalize_in_place(p);
    points.push_back(std::move(p));
    labels.push_back(data_.samples[labeled_indices_[r]].label.label);
  }
  calibrated_ = calibrate(points, labels).params;
}

void Trainer::check_store_invariants(const PseudoLabelStore& before) const {
  if (store_.size() < before.size())
    throw ContractError("pseudo-label coverage decreased");
  for (const auto& [id, label] : before.entries()) {
    const auto now = store_.get(id);
    if (!now || *now != label)
      throw ContractError("frozen pseudo-label of sample " + std::to_string(id) + " changed");
  }
  for (const auto& [id, label] : store_.entries())
    if (label < data_.num_labeled_classes)
      throw ContractError("pseudo-label " + std::to_string(label) + " collides with a labeled class");
}

EpochRecord Trainer::run_phase_epoch(Phase phase, const TrainCallbacks& callbacks) {
  const bool pretraining = phase == Phase::kPretrain;
  const int epoch_in_phase = (pretraining ? pretrain_done_ : train_done_) + 1;
  const int global_epoch = pretrain_done_ + train_done_;

  std::vector<std::size_t> pool;
  if (pretraining) {
    if (labeled_indices_.empty()) throw ConfigError("pre-training needs labeled samples");
    pool = labeled_indices_;
  } else {
    pool.resize(data_.samples.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  }
  const auto batches = batch_iterator(pool.size(), config_.batch_size, config_.seed, global_epoch);
  const auto params = model_.parameters();
  const std::int64_t total_steps = total_train_iterations();

  EpochRecord record;
  record.phase = phase;
  record.epoch = epoch_in_phase;
  std::size_t rewarded = 0, reward_sum = 0;

  for (const auto& batch_positions : batches) {
    std::vector<std::size_t> indices;
    indices.reserve(batch_positions.size());
    for (auto pos : batch_positions) indices.push_back(pool[pos]);
    const std::size_t n = indices.size();

    const double eps = pretraining ? 0.0 : epsilon(train_step_, std::max<std::int64_t>(total_steps, 1), config_.eps_min);
    const double lr = pretraining ? config_.learning_rate
                                  : learning_rate(train_step_, total_steps, config_.learning_rate);

    IterationRecord it;
    it.iteration = iteration_;
    it.phase = phase;
    it.epoch = epoch_in_phase;
    it.epsilon = eps;
    it.lr = lr;
    it.batch_size = n;

    std::vector<int> rewards;
    try {
      const auto batch = make_batch(data_.samples, data_.modalities, indices);
      const auto pass = model_.forward(batch);
      check_missing_are_zero(batch, pass);

      std::vector<std::optional<std::size_t>> labels(n);
      std::vector<std::size_t> td_rows;
      const Tensor& probs = pass.probs.value();
      for (std::size_t r = 0; r < n; ++r) {
        const auto& sample = data_.samples[indices[r]];
        labels[r] = reference_label(sample);
        if (!labels[r]) continue;
        const std::size_t chosen = select_class(probs.row(r), eps, greedy_rng_);
        td_rows.push_back(r);
        rewards.push_back(reward(chosen, *labels[r]));
      }

      if (!pretraining && config_.stlclu && !config_.refresh_actions) {
        const Tensor& actions = pass.action.value();
        for (std::size_t r = 0; r < n; ++r) {
          const auto& sample = data_.samples[indices[r]];
          if (sample.label.kind == LabelKind::kGroundTruth) continue;
          Point p(actions.row(r).begin(), actions.row(r).end());
          if (config_.cluster_cosine) normalize_in_place(p);
          memory_.record(sample.id, std::move(p));
        }
      }

      const Var zero = Var::constant(Tensor::scalar(0.0));
      const Var td = config_.losses.td ? loss_td(pass.q, td_rows, rewards) : zero;
      const Var ce = config_.losses.ce ? loss_ce(pass.probs, labels) : zero;
      Var ss = zero;
      if (config_.losses.ss) {
        const auto rows = contrastive_rows(batch, pass);
        if (rows.size() == n)
          ss = loss_ss(pass.alpha, pass.beta, config_.tau);
        else if (!rows.empty())
          ss = loss_ss(num::select_rows(pass.alpha, rows), num::select_rows(pass.beta, rows), config_.tau);
      }
      const auto total = total_loss(td, ce, ss, config_.losses);
      it.losses = total.breakdown;

      for (auto* p : params) p->zero_grad();
      num::backward(total.value);
      adam_.step(params, lr);
      for (const auto* p : params)
        if (!p->value().all_finite())
          throw NonFiniteError("parameter " + p->name + " became non-finite");
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(std::string(phase_name(phase)) + " epoch " +
                           std::to_string(epoch_in_phase) + " iteration " +
                           std::to_string(iteration_) + ": " + e.what());
    }

    std::size_t hits = 0;
    for (int r : rewards) hits += static_cast<std::size_t>(r);
    reward_sum += hits;
    rewarded += rewards.size();
    it.reward_mean = rewards.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(rewards.size());
    add_into(record.mean_losses, it.losses);
    record.epsilon = eps;
    record.lr = lr;
    if (callbacks.on_iteration) callbacks.on_iteration(it);
    ++iteration_;
    if (!pretraining) ++train_step_;
  }

  const double count = static_cast<double>(batches.size());
  record.mean_losses.l_td /= count;
  record.mean_losses.l_ce /= count;
  record.mean_losses.l_ss /= count;
  record.mean_losses.total /= count;
  record.reward_mean = rewarded ? static_cast<double>(reward_sum) / static_cast<double>(rewarded) : 0.0;

  if (pretraining) {
    ++pretrain_done_;
  } else {
    if (config_.stlclu) {
      if (config_.refresh_actions) {
        const Tensor actions = infer_actions(unlabeled_indices_);
        for (std::size_t r = 0; r < unlabeled_indices_.size(); ++r) {
          Point p(actions.row(r).begin(), actions.row(r).end());
          if (config_.cluster_cosine) normalize_in_place(p);
          memory_.record(data_.samples[unlabeled_indices_[r]].id, std::move(p));
        }
      }
      const PseudoLabelStore before = store_;
      const ClusterParams params_now = relax(*calibrated_, config_.schedule, train_done_);
      record.stlclu = assign_pseudo_labels(memory_, store_, params_now, unlabeled_count_, epoch_in_phase);
      check_store_invariants(before);
    }
    memory_.clear();
    ++train_done_;
  }
  record.coverage = unlabeled_count_ == 0 ? 1.0
                                          : static_cast<double>(store_.size()) /
                                                static_cast<double>(unlabeled_count_);
  if (callbacks.evaluate) record.eval = callbacks.evaluate(model_, store_);
  return record;
}

EpochRecord Trainer::run_epoch(const TrainCallbacks& callbacks) {
  if (pretrain_done_ < config_.pretrain_epochs) return run_phase_epoch(Phase::kPretrain, callbacks);
  if (train_done_ < config_.train_epochs) {
    if (config_.stlclu && !calibrated_) calibrate_on_labeled();
    return run_phase_epoch(Phase::kTrain, callbacks);
  }
  throw ContractError("run_epoch: training already finished");
}

std::vector<EpochRecord> Trainer::pretrain(const TrainCallbacks& callbacks) {
  std::vector<EpochRecord> records;
  while (pretrain_done_ < config_.pretrain_epochs) records.push_back(run_epoch(callbacks));
  return records;
}

std::vector<EpochRecord> Trainer::train(const TrainCallbacks& callbacks) {
  std::vector<EpochRecord> records;
  while (pretrain_done_ >= config_.pretrain_epochs && train_done_ < config_.train_epochs)
    records.push_back(run_epoch(callbacks));
  return records;
}

std::vector<EpochRecord> Trainer::run(const TrainCallbacks& callbacks) {
  std::vector<EpochRecord> records;
  while (!finished()) records.push_back(run_epoch(callbacks));
  return records;
}

}  // namespace ncd
