#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ksanc/tensor.hpp"

namespace ksanc {

// Elementwise binary operators broadcast by singleton expansion only: both
// operands must have the same rank, and each dimension must either match or
// be 1 in one of them. For example [B,1,H,W] * [B,C,H,W] -> [B,C,H,W].
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
/// Gradient passes only where lo < x < hi.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
/// Sums out `axis`; the axis is removed from the result shape.
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
/// Sum of squared entries, a scalar.
Tensor l2_norm_sq(const Tensor& x);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// out[b] = x[b, labels[b]] for x of shape [B,C].
Tensor pick(const Tensor& x, std::span<const int> labels);

/// [M,K] x [K,N] -> [M,N].
Tensor matmul(const Tensor& a, const Tensor& b);
/// input [B,D], weight [D,K], bias [K] -> [B,K].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};
/// input [B,C,H,W], kernel [K,C,kh,kw] -> [B,K,H',W'] with zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dOptions options = {});
std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride,
                             std::size_t padding);

/// Spatial mean: [B,C,H,W] -> [B,C].
Tensor global_average_pool(const Tensor& x);

struct BatchNormOptions {
  bool training = true;
  /// running = momentum * running + (1 - momentum) * batch statistic
  double momentum = 0.9;
  double eps = 1e-5;
};
/// Per-channel normalization of [B,C,H,W] (or [B,C]). Training mode uses
/// batch statistics (biased variance) and updates the running buffers in
/// place; evaluation mode uses the running buffers.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, BatchNormOptions options = {});

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean of -[t log p + (1-t) log(1-p)] with p clamped to [eps, 1-eps].
Tensor binary_cross_entropy(const Tensor& probs, double target, double eps = 1e-7);

}  // namespace ksanc
