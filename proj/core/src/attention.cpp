#include "ksanc/attention.hpp"

#include <numeric>

namespace ksanc {

AttentionEstimator::AttentionEstimator(std::size_t block_channels, std::size_t descriptor_dim,
                                       std::size_t output_channels, Initializer& init)
    : block_channels_(block_channels) {
  if (block_channels == 0 || descriptor_dim == 0 || output_channels == 0) {
    throw ConfigError("attention: channel counts must be positive");
  }
  align_ = register_parameter(
      "align", init.fan_in_normal({output_channels, descriptor_dim, 1, 1}, descriptor_dim));
  score_ = register_parameter("score",
                              init.fan_in_normal({1, output_channels, 1, 1}, output_channels));
  if (block_channels != output_channels) {
    projection_ = register_parameter(
        "projection",
        init.fan_in_normal({output_channels, block_channels, 1, 1}, block_channels));
  }
}

SqueezeResult squeeze_block_detailed(const Tensor& features, const Tensor& global_descriptor,
                                     const AttentionEstimator& est) {
  if (features.rank() != 4) {
    throw ShapeError("squeeze_block: features must be [B,C,H,W], got " +
                     shape_str(features.shape()));
  }
  if (global_descriptor.rank() != 2 || global_descriptor.dim(0) != features.dim(0)) {
    throw ShapeError("squeeze_block: global descriptor " + shape_str(global_descriptor.shape()) +
                     " does not match batch of features " + shape_str(features.shape()));
  }
  if (global_descriptor.dim(1) != est.descriptor_dim()) {
    throw ShapeError("squeeze_block: descriptor width " +
                     std::to_string(global_descriptor.dim(1)) + ", align kernel expects " +
                     std::to_string(est.descriptor_dim()));
  }
  if (features.dim(1) != est.block_channels()) {
    throw ShapeError("squeeze_block: feature map has " + std::to_string(features.dim(1)) +
                     " channels, estimator expects " + std::to_string(est.block_channels()));
  }
  const std::size_t batch = features.dim(0);
  const std::size_t h = features.dim(2), w = features.dim(3);

  const Tensor mapped =
      est.projection_kernel().defined() ? conv2d(features, est.projection_kernel()) : features;
  const Tensor aligned =
      conv2d(reshape(global_descriptor, {batch, est.descriptor_dim(), 1, 1}), est.align_kernel());
  const Tensor fused = add(mapped, aligned);
  const Tensor scores = conv2d(fused, est.score_kernel());
  const Tensor attention =
      reshape(softmax(reshape(scores, {batch, h * w}), 1), {batch, 1, h, w});
  return {global_average_pool(mul(attention, fused)), attention, fused};
}

Tensor squeeze_block(const Tensor& features, const Tensor& global_descriptor,
                     const AttentionEstimator& est) {
  return squeeze_block_detailed(features, global_descriptor, est).descriptor;
}

SqueezedDescriptors squeeze_all(const BlockFeatures& bf,
                                const std::vector<const AttentionEstimator*>& estimators) {
  if (estimators.size() != bf.features.size()) {
    throw ShapeError("squeeze_all: " + std::to_string(bf.features.size()) + " blocks but " +
                     std::to_string(estimators.size()) + " estimators");
  }
  SqueezedDescriptors out;
  for (std::size_t i = 0; i < estimators.size(); ++i) {
    out.per_block.push_back(squeeze_block(bf.features[i], bf.global_descriptor, *estimators[i]));
  }
  out.concatenated = concat(out.per_block, 1);
  return out;
}

AttentionSubnet::AttentionSubnet(const std::vector<std::size_t>& block_channels,
                                 std::size_t descriptor_dim,
                                 const std::vector<std::size_t>& output_channels,
                                 Initializer& init) {
  if (block_channels.size() != output_channels.size()) {
    throw ConfigError("attention: " + std::to_string(block_channels.size()) + " blocks but " +
                      std::to_string(output_channels.size()) + " output widths");
  }
  for (std::size_t i = 0; i < block_channels.size(); ++i) {
    estimators_.push_back(&register_module(
        "block" + std::to_string(i + 1),
        std::make_unique<AttentionEstimator>(block_channels[i], descriptor_dim,
                                             output_channels[i], init)));
  }
}

SqueezedDescriptors AttentionSubnet::forward(const BlockFeatures& bf) const {
  return squeeze_all(bf, estimators());
}

std::vector<const AttentionEstimator*> AttentionSubnet::estimators() const {
  return {estimators_.begin(), estimators_.end()};
}

std::size_t AttentionSubnet::output_dim() const {
  return std::accumulate(estimators_.begin(), estimators_.end(), std::size_t{0},
                         [](std::size_t s, const AttentionEstimator* e) {
                           return s + e->output_channels();
                         });
}

std::unique_ptr<AttentionSubnet> build_attention(const Backbone& backbone,
                                                 const std::vector<std::size_t>& output_channels,
                                                 std::uint64_t seed, DType dtype) {
  Initializer init(seed, dtype);
  return std::make_unique<AttentionSubnet>(backbone.spec().channels_per_block,
                                           backbone.descriptor_dim(), output_channels, init);
}

}  // namespace ksanc
