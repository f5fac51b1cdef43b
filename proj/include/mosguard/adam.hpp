#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mosguard/error.hpp"
#include "mosguard/tensor.hpp"

namespace mosguard {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for one parameter tensor.
class AdamState {
 public:
  AdamState(const Shape& shape, AdamConfig cfg = {}) : cfg_(cfg), m_(shape_size(shape), 0.0), v_(shape_size(shape), 0.0) {}

  const AdamConfig& config() const { return cfg_; }
  long step_count() const { return t_; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }

  /// Bias-corrected Adam update applied to param in place.
  void step(Tensor& param, const Tensor& grad) {
    if (param.size() != m_.size() || grad.shape() != param.shape()) {
      throw dimension_error("adam_step: parameter " + shape_string(param.shape()) + ", gradient " +
                            shape_string(grad.shape()) + ", state size " + std::to_string(m_.size()));
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      const double g = grad[i];
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      const double m_hat = m_[i] / bc1;
      const double v_hat = v_[i] / bc2;
      param[i] -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

inline void adam_step(AdamState& state, Tensor& param, const Tensor& grad) { state.step(param, grad); }

}  // namespace mosguard
