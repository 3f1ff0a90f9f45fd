#pragma once

// Dense row-major tensors of doubles and an eager reverse-mode graph.
//
// Every differentiable value is a Var: a shared handle to a node holding the
// forward value, the accumulated gradient, the parent nodes and a closure that
// pushes the node's gradient into its parents. Operations run eagerly and
// record themselves as they execute. backward() walks the recorded graph once
// in reverse topological order.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ncd::num {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 accessors. A rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols(), cols());
  }

  void fill(double value);
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backprop;
  bool requires_grad = false;
  const char* op = "leaf";

  // Returns grad, allocating zeros of the value's shape on first use.
  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;

  // A value that never receives gradient.
  static Var constant(Tensor value);
  // A trainable leaf: gradients accumulate across backward() calls.
  static Var leaf(Tensor value);

  bool valid() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const;
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  double item() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

struct Parameter {
  std::string name;
  Var var;

  Parameter() = default;
  Parameter(std::string param_name, Tensor init)
      : name(std::move(param_name)), var(Var::leaf(std::move(init))) {}

  Tensor& value() { return var.mutable_value(); }
  const Tensor& value() const { return var.value(); }
  const Tensor& gradient() const { return var.grad(); }
  void zero_grad() { var.zero_grad(); }
};

// Plain tensor routines shared by ops and by code that needs no graph.
Tensor matmul_values(const Tensor& a, const Tensor& b);
Tensor transpose_values(const Tensor& a);

Var matmul(const Var& a, const Var& b);
Var affine(const Var& x, const Var& w, const Var& b);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
Var cosine_similarity(const Var& u, const Var& v);
// Scales every row to unit Euclidean norm.
Var normalize_rows(const Var& x);
Var transpose(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var square(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
// Elementwise log(clamp(x, lo, hi)); zero gradient where the clamp is active.
Var log_clamped(const Var& x, double lo, double hi);

// Multiplies row r by mask[r] (constant, not differentiated).
Var mask_rows(const Var& x, std::span<const double> mask);
Var select_rows(const Var& x, std::span<const std::size_t> rows);
// out[r] = x(r, cols[r]); shape [n].
Var pick(const Var& x, std::span<const std::size_t> cols);
// Square matrix diagonal as shape [n].
Var diagonal(const Var& x);
// parts: T tensors [n x d]; output row s*T + t is row s of parts[t].
Var interleave_rows(std::span<const Var> parts);
// [(n*group) x d] -> [n x d], averaging consecutive blocks of `group` rows.
Var mean_pool_rows(const Var& x, std::size_t group);

// Multi-head scaled dot-product self-attention over independent token sets.
// q, k, v are [(n*tokens) x d]; rows s*tokens .. s*tokens+tokens-1 form the
// token set of item s. Heads split the feature axis into equal contiguous
// slices of width d/heads. When weights is non-null it receives the attention
// matrix with shape [n, heads, tokens, tokens].
Var multi_head_attention(const Var& q, const Var& k, const Var& v,
                         std::size_t tokens, std::size_t heads,
                         Tensor* weights = nullptr);

// Accumulates d(loss)/d(leaf) into every reachable trainable leaf.
void backward(const Var& loss);

// Centered-difference gradient check against backward(). Returns the maximum
// over all coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_difference_check(const std::function<Var()>& f,
                               std::span<Parameter* const> params,
                               double h = 1e-5);

}  // namespace ncd::num
