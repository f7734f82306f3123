#pragma once

#include <string>
#include <vector>

#include "ksanc/nets.hpp"

namespace ksanc {

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// SGD with heavy-ball momentum and weight decay folded into the update:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
class Sgd {
 public:
  Sgd(std::vector<Parameter> params, SgdOptions options);

  /// Applies one update to every parameter. Parameters without a gradient
  /// are treated as having a zero gradient.
  void step(double lr);
  void zero_grad();

  const std::vector<Parameter>& parameters() const { return params_; }
  /// Momentum buffers, one per parameter in the same order.
  std::vector<Parameter> state() const;
  const SgdOptions& options() const { return options_; }

 private:
  std::vector<Parameter> params_;
  std::vector<Tensor> velocity_;
  SgdOptions options_;
};

/// One update on raw arrays; Sgd::step calls this per parameter.
template <typename T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::span<T> velocity, double lr,
                double momentum, double weight_decay) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad.empty() ? T(0) : grad[i];
    velocity[i] = static_cast<T>(momentum) * velocity[i] + g +
                  static_cast<T>(weight_decay) * param[i];
    param[i] -= static_cast<T>(lr) * velocity[i];
  }
}

/// Step decay: lr(epoch) = base * factor^(number of milestones <= epoch).
/// Epochs are 0-based.
class MilestoneSchedule {
 public:
  MilestoneSchedule(double base_lr, std::vector<std::size_t> milestones, double factor);

  double lr(std::size_t epoch) const;
  const std::vector<std::size_t>& milestones() const { return milestones_; }

 private:
  double base_;
  std::vector<std::size_t> milestones_;
  double factor_;
};

/// Milestones at 40% and 80% of `epochs`, dropping duplicates and zero.
std::vector<std::size_t> default_milestones(std::size_t epochs);

}  // namespace ksanc
