#include "ksanc/optim.hpp"

#include <algorithm>

namespace ksanc {

Sgd::Sgd(std::vector<Parameter> params, SgdOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) velocity_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    visit_dtype(p.dtype(), [&]<typename T>() {
      std::span<const T> grad;
      if (p.has_grad()) grad = p.grad_data<T>();
      sgd_update<T>(p.data<T>(), grad, velocity_[i].data<T>(), lr, options_.momentum,
                    options_.weight_decay);
    });
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::vector<Parameter> Sgd::state() const {
  std::vector<Parameter> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({params_[i].name + ".velocity", velocity_[i]});
  }
  return out;
}

MilestoneSchedule::MilestoneSchedule(double base_lr, std::vector<std::size_t> milestones,
                                     double factor)
    : base_(base_lr), milestones_(std::move(milestones)), factor_(factor) {
  if (!(base_lr > 0)) throw ConfigError("learning rate must be > 0");
  if (!(factor > 0)) throw ConfigError("lr decay factor must be > 0");
  for (std::size_t i = 1; i < milestones_.size(); ++i) {
    if (milestones_[i] <= milestones_[i - 1]) {
      throw ConfigError("lr milestones must be strictly increasing");
    }
  }
}

double MilestoneSchedule::lr(std::size_t epoch) const {
  double lr = base_;
  for (auto m : milestones_)
    if (m <= epoch) lr *= factor_;
  return lr;
}

std::vector<std::size_t> default_milestones(std::size_t epochs) {
  std::vector<std::size_t> out;
  for (std::size_t pct : {40, 80}) {
    const std::size_t m = epochs * pct / 100;
    if (m > 0 && m < epochs && (out.empty() || out.back() < m)) out.push_back(m);
  }
  return out;
}

}  // namespace ksanc
