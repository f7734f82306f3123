#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ksanc/tensor.hpp"

namespace ksanc::testing {

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst;  // "input i, element j: analytic a vs numeric n"
  std::size_t checked = 0;
};

/// Relative error with a magnitude floor, so entries whose true derivative
/// is zero are compared absolutely at that floor.
inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares backward() against central differences for every input that
/// requires grad. Inputs must be double precision.
inline GradCheckResult check_gradients(const LossFn& f, std::vector<Tensor> inputs,
                                       double h = 1e-5) {
  for (auto& t : inputs)
    if (t.requires_grad()) t.zero_grad();
  const Tensor loss = f(inputs);
  loss.backward();
  GradCheckResult r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor& t = inputs[i];
    if (!t.requires_grad()) continue;
    const auto analytic = t.grad_vector();
    for (std::size_t j = 0; j < t.numel(); ++j) {
      const double x0 = t.value(j);
      double up, down;
      {
        NoGradGuard no_grad;
        t.set_value(j, x0 + h);
        up = f(inputs).item();
        t.set_value(j, x0 - h);
        down = f(inputs).item();
        t.set_value(j, x0);
      }
      const double numeric = (up - down) / (2 * h);
      const double err = rel_error(analytic[j], numeric);
      ++r.checked;
      if (err >= r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = "input " + std::to_string(i) + ", element " + std::to_string(j) +
                  ": analytic " + std::to_string(analytic[j]) + " vs numeric " +
                  std::to_string(numeric);
      }
    }
  }
  return r;
}

/// Uniform values in [lo, hi), optionally pushed at least `gap` away from
/// zero so kinks of relu/abs are not straddled by the difference stencil.
inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true, double gap = 0.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    x = dist(rng);
    if (gap > 0 && std::abs(x) < gap) x = x < 0 ? x - gap : x + gap;
  }
  Tensor t = Tensor::from_values(std::move(shape), v, DType::f64);
  t.set_requires_grad(requires_grad);
  return t;
}

}  // namespace ksanc::testing
