#include "ncd/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "ncd/errors.hpp"

namespace ncd::num {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto dim : shape) {
    if (dim == 0) {
      throw DimensionError("tensor dimensions must be positive, got " +
                           shape_string(shape));
    }
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " +
                       shape_string(a) + " and " + shape_string(b));
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_mismatch(op, a.shape(), b.shape());
}

// Finalizes an op: enforces finiteness and drops the graph edges when no input
// needs a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, const char* op,
                std::function<void(Node&)> backprop) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string("non-finite value produced by ") + op +
                         " with output shape " + shape_string(value.shape()));
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  for (const auto& in : inputs) {
    if (in.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backprop = std::move(backprop);
  }
  return Var(std::move(node));
}

// Parent gradient buffer, or nullptr when that parent is not trainable.
Tensor* parent_grad(Node& self, std::size_t i) {
  Node& parent = *self.parents[i];
  return parent.requires_grad ? &parent.ensure_grad() : nullptr;
}

const Tensor& parent_value(const Node& self, std::size_t i) {
  return self.parents[i]->value;
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (data_.size() != product(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : shape_[0]; }

std::size_t Tensor::cols() const {
  return rank() == 1 ? shape_[0] : size() / shape_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------- Node / Var

Tensor& Node::ensure_grad() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape());
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  return Var(std::move(node));
}

Var Var::leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->grad = Tensor(value.shape());
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

const Tensor& Var::grad() const { return node_->ensure_grad(); }

double Var::item() const {
  if (value().size() != 1) {
    throw ContractError("item() on non-scalar of shape " +
                        shape_string(value().shape()));
  }
  return value()[0];
}

void Var::zero_grad() { node_->ensure_grad().fill(0.0); }

// ---------------------------------------------------------------- plain math

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a.cols() != b.rows()) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  Tensor out({r, c});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    double* orow = po + i * c;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = pb + p * c;
      for (std::size_t j = 0; j < c; ++j) orow[j] += aip * brow[j];
    }
  }
  return out;
}

Tensor transpose_values(const Tensor& a) {
  require_rank2("transpose", a);
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// ---------------------------------------------------------------- ops

Var matmul(const Var& a, const Var& b) {
  Tensor out = matmul_values(a.value(), b.value());
  return make_result(std::move(out), {a, b}, "matmul", [](Node& self) {
    const Tensor& A = parent_value(self, 0);
    const Tensor& B = parent_value(self, 1);
    const Tensor& dC = self.grad;
    const std::size_t r = A.rows(), k = A.cols(), c = B.cols();
    if (Tensor* dA = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += dC(i, j) * B(p, j);
          (*dA)(i, p) += acc;
        }
    }
    if (Tensor* dB = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A(i, p);
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < c; ++j) (*dB)(p, j) += aip * dC(i, j);
        }
    }
  });
}

Var affine(const Var& x, const Var& w, const Var& b) {
  require_rank2("affine", x.value());
  require_rank2("affine", w.value());
  if (x.value().cols() != w.value().rows())
    shape_mismatch("affine", x.shape(), w.shape());
  if (b.value().size() != w.value().cols())
    shape_mismatch("affine", w.shape(), b.shape());
  Tensor out = matmul_values(x.value(), w.value());
  const std::size_t n = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += b.value()[j];
  return make_result(std::move(out), {x, w, b}, "affine", [](Node& self) {
    const Tensor& X = parent_value(self, 0);
    const Tensor& W = parent_value(self, 1);
    const Tensor& dY = self.grad;
    const std::size_t n = X.rows(), k = X.cols(), c = W.cols();
    if (Tensor* dX = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += dY(i, j) * W(p, j);
          (*dX)(i, p) += acc;
        }
    }
    if (Tensor* dW = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xip = X(i, p);
          if (xip == 0.0) continue;
          for (std::size_t j = 0; j < c; ++j) (*dW)(p, j) += xip * dY(i, j);
        }
    }
    if (Tensor* dB = parent_grad(self, 2)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) (*dB)[j] += dY(i, j);
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {x}, "relu", [](Node& self) {
    const Tensor& X = parent_value(self, 0);
    if (Tensor* dX = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < X.size(); ++i)
        if (X[i] > 0.0) (*dX)[i] += self.grad[i];
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(std::move(out), {x}, "sigmoid", [](Node& self) {
    if (Tensor* dX = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.value.size(); ++i) {
        const double s = self.value[i];
        (*dX)[i] += self.grad[i] * s * (1.0 - s);
      }
    }
  });
}

Var softmax_rows(const Var& x) {
  Tensor out = x.value();
  const std::size_t n = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < n; ++i) {
    auto row = out.row(i);
    const double top = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (auto& v : row) {
      v = std::exp(v - top);
      total += v;
    }
    for (auto& v : row) v /= total;
  }
  return make_result(std::move(out), {x}, "softmax_rows", [n, c](Node& self) {
    Tensor* dX = parent_grad(self, 0);
    if (!dX) return;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        (*dX)[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

Var log_softmax_rows(const Var& x) {
  Tensor out = x.value();
  const std::size_t n = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < n; ++i) {
    auto row = out.row(i);
    const double top = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double v : row) total += std::exp(v - top);
    const double log_norm = top + std::log(total);
    for (auto& v : row) v -= log_norm;
  }
  return make_result(std::move(out), {x}, "log_softmax_rows", [n, c](Node& self) {
    Tensor* dX = parent_grad(self, 0);
    if (!dX) return;
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        (*dX)[i * c + j] +=
            self.grad[i * c + j] - std::exp(self.value[i * c + j]) * total;
    }
  });
}

Var cosine_similarity(const Var& u, const Var& v) {
  if (u.value().size() != v.value().size())
    shape_mismatch("cosine_similarity", u.shape(), v.shape());
  const auto& a = u.value();
  const auto& b = v.value();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12)
    throw DegenerateVectorError("cosine_similarity: vector norm below 1e-12");
  const double cosine = dot / (na * nb);
  return make_result(Tensor::scalar(cosine), {u, v}, "cosine_similarity",
                     [na, nb, cosine](Node& self) {
                       const Tensor& a = parent_value(self, 0);
                       const Tensor& b = parent_value(self, 1);
                       const double g = self.grad[0];
                       if (Tensor* da = parent_grad(self, 0)) {
                         for (std::size_t i = 0; i < a.size(); ++i)
                           (*da)[i] += g * (b[i] / (na * nb) - cosine * a[i] / (na * na));
                       }
                       if (Tensor* db = parent_grad(self, 1)) {
                         for (std::size_t i = 0; i < b.size(); ++i)
                           (*db)[i] += g * (a[i] / (na * nb) - cosine * b[i] / (nb * nb));
                       }
                     });
}

Var normalize_rows(const Var& x) {
  Tensor out = x.value();
  const std::size_t n = out.rows(), c = out.cols();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (double v : out.row(i)) sq += v * v;
    norms[i] = std::sqrt(sq);
    if (norms[i] < 1e-12)
      throw DegenerateVectorError("normalize_rows: row " + std::to_string(i) +
                                  " has norm below 1e-12");
    for (auto& v : out.row(i)) v /= norms[i];
  }
  return make_result(std::move(out), {x}, "normalize_rows",
                     [n, c, norms = std::move(norms)](Node& self) {
                       Tensor* dX = parent_grad(self, 0);
                       if (!dX) return;
                       for (std::size_t i = 0; i < n; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j)
                           dot += self.value[i * c + j] * self.grad[i * c + j];
                         for (std::size_t j = 0; j < c; ++j)
                           (*dX)[i * c + j] +=
                               (self.grad[i * c + j] - self.value[i * c + j] * dot) / norms[i];
                       }
                     });
}

Var transpose(const Var& x) {
  return make_result(transpose_values(x.value()), {x}, "transpose", [](Node& self) {
    Tensor* dX = parent_grad(self, 0);
    if (!dX) return;
    const std::size_t r = dX->rows(), c = dX->cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*dX)(i, j) += self.grad(j, i);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, "add", [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (Tensor* d = parent_grad(self, p))
        for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, "sub", [](Node& self) {
    if (Tensor* d = parent_grad(self, 0))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i];
    if (Tensor* d = parent_grad(self, 1))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, "mul", [](Node& self) {
    const Tensor& A = parent_value(self, 0);
    const Tensor& B = parent_value(self, 1);
    if (Tensor* d = parent_grad(self, 0))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i] * B[i];
    if (Tensor* d = parent_grad(self, 1))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i] * A[i];
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  return make_result(std::move(out), {a}, "scale", [factor](Node& self) {
    if (Tensor* d = parent_grad(self, 0))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i] * factor;
  });
}

Var square(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= v;
  return make_result(std::move(out), {x}, "square", [](Node& self) {
    const Tensor& X = parent_value(self, 0);
    if (Tensor* d = parent_grad(self, 0))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += 2.0 * X[i] * self.grad[i];
  });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return make_result(Tensor::scalar(total), {x}, "sum", [](Node& self) {
    if (Tensor* d = parent_grad(self, 0))
      for (auto& v : d->data()) v += self.grad[0];
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var log_clamped(const Var& x, double lo, double hi) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::log(std::clamp(v, lo, hi));
  return make_result(std::move(out), {x}, "log_clamped", [lo, hi](Node& self) {
    const Tensor& X = parent_value(self, 0);
    if (Tensor* d = parent_grad(self, 0))
      for (std::size_t i = 0; i < d->size(); ++i)
        if (X[i] > lo && X[i] < hi) (*d)[i] += self.grad[i] / X[i];
  });
}

Var mask_rows(const Var& x, std::span<const double> mask) {
  Tensor out = x.value();
  if (mask.size() != out.rows())
    throw DimensionError("mask_rows: mask length " + std::to_string(mask.size()) +
                         " does not match " + shape_string(out.shape()));
  std::vector<double> m(mask.begin(), mask.end());
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (auto& v : out.row(i)) v *= m[i];
  return make_result(std::move(out), {x}, "mask_rows", [m = std::move(m)](Node& self) {
    Tensor* d = parent_grad(self, 0);
    if (!d) return;
    const std::size_t c = d->cols();
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) (*d)[i * c + j] += m[i] * self.grad[i * c + j];
  });
}

Var select_rows(const Var& x, std::span<const std::size_t> rows) {
  require_rank2("select_rows", x.value());
  const std::size_t c = x.value().cols();
  if (rows.empty()) throw ContractError("select_rows: empty row selection");
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.value().rows())
      throw ContractError("select_rows: row " + std::to_string(rows[i]) +
                          " out of range for " + shape_string(x.shape()));
    std::copy_n(x.value().row(rows[i]).begin(), c, out.row(i).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(std::move(out), {x}, "select_rows", [idx = std::move(idx), c](Node& self) {
    Tensor* d = parent_grad(self, 0);
    if (!d) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) (*d)(idx[i], j) += self.grad(i, j);
  });
}

Var pick(const Var& x, std::span<const std::size_t> cols) {
  const Tensor& X = x.value();
  if (cols.size() != X.rows())
    throw DimensionError("pick: " + std::to_string(cols.size()) +
                         " indices for " + shape_string(X.shape()));
  Tensor out({cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= X.cols())
      throw ContractError("pick: column " + std::to_string(cols[i]) +
                          " out of range for " + shape_string(X.shape()));
    out[i] = X(i, cols[i]);
  }
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  return make_result(std::move(out), {x}, "pick", [idx = std::move(idx)](Node& self) {
    Tensor* d = parent_grad(self, 0);
    if (!d) return;
    for (std::size_t i = 0; i < idx.size(); ++i) (*d)(i, idx[i]) += self.grad[i];
  });
}

Var diagonal(const Var& x) {
  const Tensor& X = x.value();
  require_rank2("diagonal", X);
  if (X.rows() != X.cols()) shape_mismatch("diagonal", X.shape(), X.shape());
  Tensor out({X.rows()});
  for (std::size_t i = 0; i < X.rows(); ++i) out[i] = X(i, i);
  return make_result(std::move(out), {x}, "diagonal", [](Node& self) {
    Tensor* d = parent_grad(self, 0);
    if (!d) return;
    for (std::size_t i = 0; i < self.value.size(); ++i) (*d)(i, i) += self.grad[i];
  });
}

Var interleave_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("interleave_rows: no inputs");
  const Shape& first = parts[0].shape();
  for (const auto& p : parts) {
    require_rank2("interleave_rows", p.value());
    if (p.shape() != first) shape_mismatch("interleave_rows", first, p.shape());
  }
  const std::size_t n = first[0], d = first[1], t = parts.size();
  Tensor out({n * t, d});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < t; ++k)
      std::copy_n(parts[k].value().row(s).begin(), d, out.row(s * t + k).begin());
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), inputs, "interleave_rows", [n, d, t](Node& self) {
    for (std::size_t k = 0; k < t; ++k) {
      Tensor* g = parent_grad(self, k);
      if (!g) continue;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < d; ++j) (*g)(s, j) += self.grad(s * t + k, j);
    }
  });
}

Var mean_pool_rows(const Var& x, std::size_t group) {
  const Tensor& X = x.value();
  require_rank2("mean_pool_rows", X);
  if (group == 0 || X.rows() % group != 0)
    throw DimensionError("mean_pool_rows: " + shape_string(X.shape()) +
                         " is not divisible into groups of " + std::to_string(group));
  const std::size_t n = X.rows() / group, d = X.cols();
  const double w = 1.0 / static_cast<double>(group);
  Tensor out({n, d});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < group; ++k)
      for (std::size_t j = 0; j < d; ++j) out(s, j) += w * X(s * group + k, j);
  return make_result(std::move(out), {x}, "mean_pool_rows", [n, d, group, w](Node& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < group; ++k)
        for (std::size_t j = 0; j < d; ++j) (*g)(s * group + k, j) += w * self.grad(s, j);
  });
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v,
                         std::size_t tokens, std::size_t heads, Tensor* weights) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  require_rank2("multi_head_attention", Q);
  if (K.shape() != Q.shape()) shape_mismatch("multi_head_attention", Q.shape(), K.shape());
  if (V.shape() != Q.shape()) shape_mismatch("multi_head_attention", Q.shape(), V.shape());
  const std::size_t rows = Q.rows(), d = Q.cols();
  if (tokens == 0 || rows % tokens != 0)
    throw DimensionError("multi_head_attention: " + std::to_string(rows) +
                         " rows are not a multiple of " + std::to_string(tokens) + " tokens");
  if (heads == 0 || d % heads != 0)
    throw DimensionError("multi_head_attention: width " + std::to_string(d) +
                         " is not divisible by " + std::to_string(heads) + " heads");
  const std::size_t n = rows / tokens, dk = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  // attn[((s*heads + h)*tokens + t)*tokens + u]
  std::vector<double> attn(n * heads * tokens * tokens);
  Tensor out({rows, d});
  std::vector<double> scores(tokens);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t base = s * tokens;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dk;
      for (std::size_t t = 0; t < tokens; ++t) {
        double top = -INFINITY;
        for (std::size_t u = 0; u < tokens; ++u) {
          double dot = 0.0;
          for (std::size_t c = c0; c < c0 + dk; ++c) dot += Q(base + t, c) * K(base + u, c);
          scores[u] = dot * inv_sqrt;
          top = std::max(top, scores[u]);
        }
        double total = 0.0;
        for (auto& sc : scores) {
          sc = std::exp(sc - top);
          total += sc;
        }
        double* a = &attn[((s * heads + h) * tokens + t) * tokens];
        for (std::size_t u = 0; u < tokens; ++u) a[u] = scores[u] / total;
        for (std::size_t u = 0; u < tokens; ++u)
          for (std::size_t c = c0; c < c0 + dk; ++c) out(base + t, c) += a[u] * V(base + u, c);
      }
    }
  }
  if (weights) *weights = Tensor({n, heads, tokens, tokens}, attn);

  return make_result(
      std::move(out), {q, k, v}, "multi_head_attention",
      [n, tokens, heads, dk, inv_sqrt, attn = std::move(attn)](Node& self) {
        const Tensor& Q = parent_value(self, 0);
        const Tensor& K = parent_value(self, 1);
        const Tensor& V = parent_value(self, 2);
        Tensor* dQ = parent_grad(self, 0);
        Tensor* dK = parent_grad(self, 1);
        Tensor* dV = parent_grad(self, 2);
        const Tensor& dO = self.grad;
        std::vector<double> dA(tokens), dS(tokens);
        for (std::size_t s = 0; s < n; ++s) {
          const std::size_t base = s * tokens;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dk;
            for (std::size_t t = 0; t < tokens; ++t) {
              const double* a = &attn[((s * heads + h) * tokens + t) * tokens];
              double weighted = 0.0;
              for (std::size_t u = 0; u < tokens; ++u) {
                double acc = 0.0;
                for (std::size_t c = c0; c < c0 + dk; ++c) acc += dO(base + t, c) * V(base + u, c);
                dA[u] = acc;
                weighted += a[u] * acc;
              }
              for (std::size_t u = 0; u < tokens; ++u) dS[u] = a[u] * (dA[u] - weighted) * inv_sqrt;
              for (std::size_t u = 0; u < tokens; ++u) {
                for (std::size_t c = c0; c < c0 + dk; ++c) {
                  if (dV) (*dV)(base + u, c) += a[u] * dO(base + t, c);
                  if (dQ) (*dQ)(base + t, c) += dS[u] * K(base + u, c);
                  if (dK) (*dK)(base + u, c) += dS[u] * Q(base + t, c);
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------- backward

void backward(const Var& loss) {
  if (!loss.valid()) throw ContractError("backward: empty variable");
  if (loss.value().size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* node : order)
    if (node->backprop) node->ensure_grad().fill(0.0);
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

double finite_difference_check(const std::function<Var()>& f,
                               std::span<Parameter* const> params, double h) {
  if (h <= 0.0) throw ContractError("finite_difference_check: step must be positive");
  for (auto* p : params) p->zero_grad();
  backward(f());
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->gradient());

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& value = params[pi]->value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = f().item();
      value[i] = saved - h;
      const double down = f().item();
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace ncd::num
