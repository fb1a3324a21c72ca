#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>

#include "fwdalloc/linalg.hpp"

namespace fwdalloc {

enum class OptimizerKind { sgd, adam };
enum class LrSchedule { constant, cosine };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  LrSchedule schedule = LrSchedule::constant;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Learning rate at `step` of `total_steps`; cosine decays to zero at the end.
inline double scheduled_lr(const OptimizerConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (cfg.schedule == LrSchedule::constant || total_steps == 0) return cfg.lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * frac));
}

class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::size_t dim) : cfg_(cfg), m_(dim, 0.0), v_(dim, 0.0) {}

  [[nodiscard]] const OptimizerConfig& config() const noexcept { return cfg_; }

  /// theta -= lr * direction, where direction is the raw gradient (sgd) or
  /// the bias-corrected Adam ratio.
  void step(std::span<double> theta, std::span<const double> grad, double lr) {
    require_same_size(theta.size(), m_.size(), "Optimizer::step theta");
    require_same_size(grad.size(), m_.size(), "Optimizer::step grad");
    if (cfg_.kind == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
      return;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      theta[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
    }
  }

 private:
  OptimizerConfig cfg_;
  Vector m_;
  Vector v_;
  std::size_t t_ = 0;
};

}  // namespace fwdalloc
