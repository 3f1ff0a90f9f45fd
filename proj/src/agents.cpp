#include "ncd/agents.hpp"

#include <cmath>
#include <string>

#include "ncd/errors.hpp"

namespace ncd {

using num::Parameter;
using num::Tensor;
using num::Var;

namespace {

Tensor glorot(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor t({in, out});
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

void ModelConfig::validate() const {
  if (modality_dims.empty()) throw ConfigError("model needs at least one modality");
  for (auto d : modality_dims)
    if (d == 0) throw ConfigError("modality dimension must be at least 1");
  if (feature_dim == 0) throw ConfigError("feature-dim must be at least 1");
  if (heads == 0 || feature_dim % heads != 0)
    throw ConfigError("heads must divide feature-dim");
  if (num_classes == 0) throw ConfigError("class head needs at least one class");
}

MemberAgent::MemberAgent(std::size_t modality, std::size_t input_dim, std::size_t feature_dim,
                         Rng& rng)
    : modality_(modality), input_dim_(input_dim) {
  const std::string prefix = "member" + std::to_string(modality) + ".";
  w1 = Parameter(prefix + "w1", glorot(input_dim, feature_dim, rng));
  b1 = Parameter(prefix + "b1", Tensor({feature_dim}));
  w2 = Parameter(prefix + "w2", glorot(feature_dim, feature_dim, rng));
  b2 = Parameter(prefix + "b2", Tensor({feature_dim}));
}

Var MemberAgent::encode(const Var& inputs, std::span<const double> present) const {
  if (inputs.value().rank() != 2 || inputs.value().cols() != input_dim_)
    throw DimensionError("member " + std::to_string(modality_) + ": expected input width " +
                         std::to_string(input_dim_) + ", got shape " +
                         num::shape_string(inputs.shape()));
  Var hidden = num::relu(num::affine(inputs, w1.var, b1.var));
  return num::mask_rows(num::affine(hidden, w2.var, b2.var), present);
}

AttentionBlock::AttentionBlock(const std::string& name, std::size_t feature_dim,
                               std::size_t heads, Rng& rng)
    : heads_(heads) {
  wq = Parameter(name + ".wq", glorot(feature_dim, feature_dim, rng));
  wk = Parameter(name + ".wk", glorot(feature_dim, feature_dim, rng));
  wv = Parameter(name + ".wv", glorot(feature_dim, feature_dim, rng));
  wo = Parameter(name + ".wo", glorot(feature_dim, feature_dim, rng));
  bo = Parameter(name + ".bo", Tensor({feature_dim}));
}

Var AttentionBlock::fuse(std::span<const Var> tokens, Tensor* weights) const {
  if (tokens.empty()) throw ContractError("attention block needs at least one token");
  const std::size_t t = tokens.size();
  Var stacked = num::interleave_rows(tokens);
  Var attended = num::multi_head_attention(num::matmul(stacked, wq.var),
                                           num::matmul(stacked, wk.var),
                                           num::matmul(stacked, wv.var), t, heads_, weights);
  return num::affine(num::mean_pool_rows(attended, t), wo.var, bo.var);
}

BatchInput make_batch(std::span<const MultiModalSample> samples,
                      std::span<const ModalitySpec> modalities,
                      std::span<const std::size_t> indices) {
  BatchInput batch;
  const std::size_t n = indices.size();
  if (n == 0) throw ContractError("make_batch: empty batch");
  for (const auto& spec : modalities) {
    Tensor x({n, spec.dim});
    std::vector<double> present(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const auto& m = samples[indices[r]].modalities[spec.id];
      if (!m) continue;
      if (m->size() != spec.dim)
        throw DimensionError("sample " + std::to_string(samples[indices[r]].id) +
                             " modality " + std::to_string(spec.id) + " has width " +
                             std::to_string(m->size()) + ", expected " + std::to_string(spec.dim));
      std::copy(m->begin(), m->end(), x.row(r).begin());
      present[r] = 1.0;
    }
    batch.inputs.push_back(std::move(x));
    batch.present.push_back(std::move(present));
  }
  return batch;
}

namespace {

std::vector<MemberAgent> make_members(const ModelConfig& config, Rng& rng) {
  std::vector<MemberAgent> members;
  for (std::size_t j = 0; j < config.modality_dims.size(); ++j)
    members.emplace_back(j, config.modality_dims[j], config.feature_dim, rng);
  return members;
}

LeaderAgent make_leader(const ModelConfig& config, Rng& rng) {
  AttentionBlock a("leader.group_a", config.feature_dim, config.heads, rng);
  AttentionBlock b("leader.group_b", config.feature_dim, config.heads, rng);
  AttentionBlock f("leader.final", config.feature_dim, config.heads, rng);
  return LeaderAgent{std::move(a), std::move(b), std::move(f)};
}

Heads make_heads(const ModelConfig& config, Rng& rng) {
  Heads h;
  h.class_w = Parameter("heads.class_w", glorot(config.feature_dim, config.num_classes, rng));
  h.class_b = Parameter("heads.class_b", Tensor({config.num_classes}));
  h.q_w = Parameter("heads.q_w", glorot(config.feature_dim, 1, rng));
  h.q_b = Parameter("heads.q_b", Tensor({1}));
  return h;
}

const ModelConfig& validated(const ModelConfig& config) {
  config.validate();
  return config;
}

}  // namespace

// Each sub-network draws from its own init stream, so changing the head width
// leaves the encoder and leader initialization untouched.
Model::Model(const ModelConfig& config, std::uint64_t seed)
    : config_(validated(config)),
      members_([&] {
        Rng rng(seed, "init/members");
        return make_members(config_, rng);
      }()),
      leader_([&] {
        Rng rng(seed, "init/leader");
        return make_leader(config_, rng);
      }()),
      heads_([&] {
        Rng rng(seed, "init/heads");
        return make_heads(config_, rng);
      }()) {}

ForwardPass Model::forward(const BatchInput& batch) const {
  if (batch.inputs.size() != members_.size())
    throw DimensionError("batch has " + std::to_string(batch.inputs.size()) +
                         " modalities, model expects " + std::to_string(members_.size()));
  ForwardPass out;
  for (std::size_t j = 0; j < members_.size(); ++j)
    out.member_features.push_back(
        members_[j].encode(Var::constant(batch.inputs[j]), batch.present[j]));
  auto [group_a, group_b] = group_features(out.member_features);
  out.alpha = fuse_group(leader_.group_a, group_a);
  out.beta = fuse_group(leader_.group_b, group_b);
  out.action = fuse_final(leader_, out.alpha, out.beta);
  out.probs = classify(heads_, out.action);
  out.q = q_value(heads_, out.action);
  return out;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> params;
  for (auto& m : members_)
    for (auto* p : {&m.w1, &m.b1, &m.w2, &m.b2}) params.push_back(p);
  for (auto* block : {&leader_.group_a, &leader_.group_b, &leader_.final_block})
    for (auto* p : {&block->wq, &block->wk, &block->wv, &block->wo, &block->bo}) params.push_back(p);
  for (auto* p : {&heads_.class_w, &heads_.class_b, &heads_.q_w, &heads_.q_b}) params.push_back(p);
  return params;
}

std::vector<const Parameter*> Model::parameters() const {
  auto mutable_params = const_cast<Model*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

Tensor encode(const MemberAgent& member, const ModalityVector& x, std::size_t feature_dim) {
  if (!x) return Tensor({feature_dim});
  if (x->size() != member.input_dim())
    throw DimensionError("member " + std::to_string(member.modality()) + ": expected input width " +
                         std::to_string(member.input_dim()) + ", got " + std::to_string(x->size()));
  const double present = 1.0;
  Var out = member.encode(Var::constant(Tensor({1, x->size()}, *x)), {&present, 1});
  return Tensor({feature_dim}, out.value().values());
}

std::pair<std::vector<Var>, std::vector<Var>> group_features(std::span<const Var> features) {
  if (features.empty()) throw ContractError("group_features: no member features");
  std::vector<Var> padded(features.begin(), features.end());
  if (padded.size() % 2 == 1) padded.push_back(Var::constant(Tensor(features[0].shape())));
  std::vector<Var> a, b;
  for (std::size_t i = 0; i < padded.size(); ++i) (i % 2 == 0 ? a : b).push_back(padded[i]);
  return {std::move(a), std::move(b)};
}

Var fuse_group(const AttentionBlock& block, std::span<const Var> tokens, Tensor* weights) {
  return block.fuse(tokens, weights);
}

Var fuse_final(const LeaderAgent& leader, const Var& alpha, const Var& beta, Tensor* weights) {
  const Var pair[] = {alpha, beta};
  return leader.final_block.fuse(pair, weights);
}

std::vector<std::size_t> contrastive_rows(const BatchInput& batch, const ForwardPass& pass) {
  // Same threshold as normalize_rows.
  auto nonzero = [](std::span<const double> row) {
    double sq = 0.0;
    for (double x : row) sq += x * x;
    return std::sqrt(sq) >= 1e-12;
  };
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    bool seen[2] = {false, false};
    for (std::size_t j = 0; j < batch.present.size(); ++j) seen[j % 2] |= batch.present[j][r] != 0.0;
    if (seen[0] && seen[1] && nonzero(pass.alpha.value().row(r)) && nonzero(pass.beta.value().row(r)))
      rows.push_back(r);
  }
  return rows;
}

Var classify(const Heads& heads, const Var& action) {
  return num::softmax_rows(num::affine(action, heads.class_w.var, heads.class_b.var));
}

Var q_value(const Heads& heads, const Var& action) {
  return num::sigmoid(num::affine(action, heads.q_w.var, heads.q_b.var));
}

}  // namespace ncd
