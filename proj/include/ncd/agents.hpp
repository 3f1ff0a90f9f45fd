#pragma once

// Member-to-leader fusion network.
//
//   member j:  x^j -> affine -> relu -> affine -> l^j        (zero if missing)
//   leader:    pad {l^j} to even length, split by index parity into two
//              groups, fuse each group with a self-attention block (l^a, l^b),
//              then fuse (l^a, l^b) with a third block into the action l.
//   heads:     class head softmax(affine(l)), q head logistic(affine(l)).
//
// Everything runs on batches: a modality input is an [n x dim] tensor plus a
// presence mask, and every intermediate feature is [n x d].

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ncd/datagen.hpp"
#include "ncd/numkit.hpp"
#include "ncd/rng.hpp"

namespace ncd {

struct ModelConfig {
  std::vector<std::size_t> modality_dims;
  std::size_t feature_dim = 64;
  std::size_t heads = 4;
  std::size_t num_classes = 2;

  void validate() const;
};

class MemberAgent {
 public:
  MemberAgent(std::size_t modality, std::size_t input_dim, std::size_t feature_dim, Rng& rng);

  // inputs: [n x input_dim] with arbitrary rows where present[r] == 0.
  // Rows with present[r] == 0 come out as exact zero vectors.
  num::Var encode(const num::Var& inputs, std::span<const double> present) const;

  std::size_t modality() const { return modality_; }
  std::size_t input_dim() const { return input_dim_; }

  num::Parameter w1, b1, w2, b2;

 private:
  std::size_t modality_;
  std::size_t input_dim_;
};

// Self-attention over a token set, mean pooling, then an output affine layer.
class AttentionBlock {
 public:
  AttentionBlock(const std::string& name, std::size_t feature_dim, std::size_t heads, Rng& rng);

  // tokens: T tensors [n x d]. If weights is non-null it receives the
  // attention weights with shape [n, heads, T, T].
  num::Var fuse(std::span<const num::Var> tokens, num::Tensor* weights = nullptr) const;

  std::size_t heads() const { return heads_; }

  num::Parameter wq, wk, wv, wo, bo;

 private:
  std::size_t heads_;
};

struct LeaderAgent {
  AttentionBlock group_a;
  AttentionBlock group_b;
  AttentionBlock final_block;
};

struct Heads {
  num::Parameter class_w, class_b, q_w, q_b;
};

// Network outputs for one batch.
struct ForwardPass {
  std::vector<num::Var> member_features;  // m tensors [n x d]
  num::Var alpha;                         // [n x d]
  num::Var beta;                          // [n x d]
  num::Var action;                        // [n x d]
  num::Var probs;                         // [n x c]
  num::Var q;                             // [n x 1]
};

// One batch of raw modality inputs.
struct BatchInput {
  std::vector<num::Tensor> inputs;          // per modality [n x dim]
  std::vector<std::vector<double>> present;  // per modality, 1 or 0 per row
  std::size_t size() const { return present.empty() ? 0 : present[0].size(); }
};

BatchInput make_batch(std::span<const MultiModalSample> samples,
                      std::span<const ModalitySpec> modalities,
                      std::span<const std::size_t> indices);

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ForwardPass forward(const BatchInput& batch) const;

  // All trainable parameters in a fixed declaration order.
  std::vector<num::Parameter*> parameters();
  std::vector<const num::Parameter*> parameters() const;

  std::vector<MemberAgent>& members() { return members_; }
  const std::vector<MemberAgent>& members() const { return members_; }
  LeaderAgent& leader() { return leader_; }
  const LeaderAgent& leader() const { return leader_; }
  Heads& heads() { return heads_; }
  const Heads& heads() const { return heads_; }

 private:
  ModelConfig config_;
  std::vector<MemberAgent> members_;
  LeaderAgent leader_;
  Heads heads_;
};

// Single-object encoding; a missing modality yields the zero vector of length d.
num::Tensor encode(const MemberAgent& member, const ModalityVector& x, std::size_t feature_dim);

// Pads to an even count with a zero tensor, then splits by index parity.
std::pair<std::vector<num::Var>, std::vector<num::Var>> group_features(
    std::span<const num::Var> features);

num::Var fuse_group(const AttentionBlock& block, std::span<const num::Var> tokens,
                    num::Tensor* weights = nullptr);
num::Var fuse_final(const LeaderAgent& leader, const num::Var& alpha, const num::Var& beta,
                    num::Tensor* weights = nullptr);
// Rows that carry two usable views for the contrastive loss: a present
// modality in both fusion groups and non-zero alpha and beta.
std::vector<std::size_t> contrastive_rows(const BatchInput& batch, const ForwardPass& pass);

num::Var classify(const Heads& heads, const num::Var& action);
num::Var q_value(const Heads& heads, const num::Var& action);

}  // namespace ncd
