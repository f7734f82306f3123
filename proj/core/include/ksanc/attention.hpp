#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "ksanc/nets.hpp"

namespace ksanc {

/// Attention estimator for one block. The global descriptor is aligned to
/// the block's channel count by a 1x1 convolution, added to every spatial
/// position of the feature map, and a single-channel 1x1 score kernel turns
/// the fused map into a spatial softmax distribution.
///
/// When the block is wider than the target descriptor width, a 1x1
/// projection first maps the block's channels down to the target width.
class AttentionEstimator : public Module {
 public:
  AttentionEstimator(std::size_t block_channels, std::size_t descriptor_dim,
                     std::size_t output_channels, Initializer& init);

  /// [K,D,1,1], maps the global descriptor to K channels.
  const Tensor& align_kernel() const { return align_; }
  /// [1,K,1,1]
  const Tensor& score_kernel() const { return score_; }
  /// [K,C,1,1] or undefined when the block already has K channels.
  const Tensor& projection_kernel() const { return projection_; }

  std::size_t block_channels() const { return block_channels_; }
  std::size_t descriptor_dim() const { return align_.dim(1); }
  std::size_t output_channels() const { return align_.dim(0); }

 private:
  std::size_t block_channels_;
  Tensor align_;
  Tensor score_;
  Tensor projection_;
};

struct SqueezeResult {
  /// [B,K]
  Tensor descriptor;
  /// [B,1,H,W], sums to 1 over the spatial positions of each sample.
  Tensor attention;
  /// [B,K,H,W], feature map after adding the aligned descriptor.
  Tensor fused;
};

SqueezeResult squeeze_block_detailed(const Tensor& features, const Tensor& global_descriptor,
                                     const AttentionEstimator& est);
/// Attention-weighted spatial average of one block: [B,C,H,W] -> [B,K].
Tensor squeeze_block(const Tensor& features, const Tensor& global_descriptor,
                     const AttentionEstimator& est);

struct SqueezedDescriptors {
  std::vector<Tensor> per_block;
  Tensor concatenated;
};

SqueezedDescriptors squeeze_all(const BlockFeatures& bf,
                                const std::vector<const AttentionEstimator*>& estimators);

/// One estimator per backbone block, sized so the concatenated descriptor
/// has width equal to the sum of `output_channels`.
class AttentionSubnet : public Module {
 public:
  AttentionSubnet(const std::vector<std::size_t>& block_channels, std::size_t descriptor_dim,
                  const std::vector<std::size_t>& output_channels, Initializer& init);

  SqueezedDescriptors forward(const BlockFeatures& bf) const;
  std::vector<const AttentionEstimator*> estimators() const;
  std::size_t output_dim() const;

 private:
  std::vector<AttentionEstimator*> estimators_;
};

std::unique_ptr<AttentionSubnet> build_attention(const Backbone& backbone,
                                                 const std::vector<std::size_t>& output_channels,
                                                 std::uint64_t seed, DType dtype = DType::f32);

}  // namespace ksanc
