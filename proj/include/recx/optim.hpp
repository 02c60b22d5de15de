#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include <Eigen/Core>

namespace recx {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled
  std::size_t warmup_steps = 0;  // linear ramp of the learning rate
};

// Adam with decoupled weight decay over one dense parameter block.
template <typename Scalar>
class AdamW {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  AdamW(Eigen::Index rows, Eigen::Index cols, AdamConfig config)
      : config_(config), first_(Matrix::Zero(rows, cols)), second_(Matrix::Zero(rows, cols)) {}

  double current_learning_rate() const {
    if (config_.warmup_steps == 0) return config_.learning_rate;
    const double ramp = static_cast<double>(step_ + 1) / static_cast<double>(config_.warmup_steps);
    return config_.learning_rate * std::min(1.0, ramp);
  }

  void step(Matrix& params, const Matrix& grad) {
    const double lr = current_learning_rate();
    ++step_;
    first_ = config_.beta1 * first_ + (1.0 - config_.beta1) * grad;
    second_ = config_.beta2 * second_ + (1.0 - config_.beta2) * grad.cwiseProduct(grad);
    const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    if (config_.weight_decay > 0.0) params *= (1.0 - lr * config_.weight_decay);
    params.array() -= lr * (first_.array() / bias1) /
                      ((second_.array() / bias2).sqrt() + config_.epsilon);
  }

  std::size_t steps() const { return step_; }

 private:
  AdamConfig config_;
  Matrix first_;
  Matrix second_;
  std::size_t step_ = 0;
};

}  // namespace recx
