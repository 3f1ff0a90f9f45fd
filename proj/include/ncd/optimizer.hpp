#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ncd/numkit.hpp"

namespace ncd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;  // decoupled
};

// lr0 * (1 - iteration / total), never below lr0 / 100.
double learning_rate(std::int64_t iteration, std::int64_t total, double lr0);

class Adam {
 public:
  Adam() = default;
  Adam(std::span<num::Parameter* const> params, AdamConfig config);

  // One bias-corrected Adam update with decoupled weight decay, reading each
  // parameter's accumulated gradient.
  void step(std::span<num::Parameter* const> params, double lr);

  std::int64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  std::vector<num::Tensor>& first_moments() { return m_; }
  std::vector<num::Tensor>& second_moments() { return v_; }
  const std::vector<num::Tensor>& first_moments() const { return m_; }
  const std::vector<num::Tensor>& second_moments() const { return v_; }
  void set_steps(std::int64_t steps) { steps_ = steps; }

 private:
  AdamConfig config_;
  std::vector<num::Tensor> m_;
  std::vector<num::Tensor> v_;
  std::int64_t steps_ = 0;
};

}  // namespace ncd
