#include "ncd/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "ncd/errors.hpp"

namespace ncd {

double learning_rate(std::int64_t iteration, std::int64_t total, double lr0) {
  if (total <= 0) return lr0;
  const double linear =
      lr0 * (1.0 - static_cast<double>(iteration) / static_cast<double>(total));
  return std::max(lr0 / 100.0, linear);
}

Adam::Adam(std::span<num::Parameter* const> params, AdamConfig config) : config_(config) {
  for (const auto* p : params) {
    m_.emplace_back(p->value().shape());
    v_.emplace_back(p->value().shape());
  }
}

void Adam::step(std::span<num::Parameter* const> params, double lr) {
  if (params.size() != m_.size())
    throw ContractError("adam: parameter count changed since construction");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    num::Tensor& value = params[pi]->value();
    const num::Tensor& grad = params[pi]->gradient();
    num::Tensor& m = m_[pi];
    num::Tensor& v = v_[pi];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
      value[i] -= lr * (update + config_.weight_decay * value[i]);
    }
  }
}

}  // namespace ncd
