#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ksanc/ops.hpp"
#include "ksanc/tensor.hpp"

namespace ksanc {

/// A trainable tensor and its dotted path inside the owning network.
struct Parameter {
  std::string name;
  Tensor tensor;
};

enum class Mode { train, eval };

/// Draws initial weights in registration order from one seeded stream.
class Initializer {
 public:
  Initializer(std::uint64_t seed, DType dtype) : rng_(seed), dtype_(dtype) {}

  /// Gaussian with standard deviation sqrt(2 / fan_in).
  Tensor fan_in_normal(Shape shape, std::size_t fan_in);
  Tensor zeros(Shape shape) const { return Tensor::zeros(std::move(shape), dtype_); }
  Tensor ones(Shape shape) const { return Tensor::full(std::move(shape), 1.0, dtype_); }
  DType dtype() const { return dtype_; }

 private:
  std::mt19937_64 rng_;
  DType dtype_;
};

/// Owns parameters, state buffers and child modules under stable names.
class Module {
 public:
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<Parameter> parameters() const;
  /// Non-trainable state such as normalization running statistics.
  std::vector<Parameter> buffers() const;
  /// parameters() followed by buffers(); everything a checkpoint stores.
  std::vector<Parameter> state() const;
  std::size_t parameter_count() const;

  /// Frozen modules neither receive gradients nor record graphs for their
  /// weights; gradients still flow through them to their inputs.
  void set_trainable(bool trainable);
  void zero_grad();

 protected:
  Module() = default;

  Tensor register_parameter(std::string name, Tensor tensor);
  Tensor register_buffer(std::string name, Tensor tensor);
  template <typename M>
  M& register_module(std::string name, std::unique_ptr<M> module) {
    M& ref = *module;
    children_.emplace_back(std::move(name), std::move(module));
    return ref;
  }

 private:
  void collect(const std::string& prefix, bool params, std::vector<Parameter>& out) const;

  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

class Conv2d : public Module {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride, std::size_t padding, Initializer& init);
  Tensor forward(const Tensor& x) const;
  const Tensor& weight() const { return weight_; }

 private:
  Tensor weight_;
  Conv2dOptions options_;
};

class Linear : public Module {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Initializer& init);
  Tensor forward(const Tensor& x) const;
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }

 private:
  Tensor weight_;
  Tensor bias_;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d(std::size_t channels, Initializer& init);
  Tensor forward(const Tensor& x, Mode mode);

 private:
  Tensor gamma_, beta_, running_mean_, running_var_;
};

/// Pre-activation residual unit: BN-ReLU-conv3x3-BN-ReLU-conv3x3 plus the
/// identity, or a 1x1 projection of the pre-activated input when the unit
/// changes width or stride.
class PreActUnit : public Module {
 public:
  PreActUnit(std::size_t in_channels, std::size_t out_channels, std::size_t stride,
             Initializer& init);
  Tensor forward(const Tensor& x, Mode mode);

 private:
  BatchNorm2d* bn1_;
  Conv2d* conv1_;
  BatchNorm2d* bn2_;
  Conv2d* conv2_;
  Conv2d* shortcut_ = nullptr;
};

struct BackboneSpec {
  std::size_t num_blocks = 3;
  std::vector<std::size_t> channels_per_block{8, 16, 32};
  std::vector<std::size_t> layers_per_block{1, 1, 1};
  std::size_t num_classes = 2;
  /// [channels, height, width]
  std::vector<std::size_t> input_shape{1, 16, 16};

  /// Throws ConfigError when the lists disagree with num_blocks or the input
  /// is too small for num_blocks - 1 stride-2 stages.
  void validate() const;
  std::string to_string() const;
};

/// Output of one backbone pass: every block's feature map, the pooled
/// vector feeding the classifier, and the logits.
struct BlockFeatures {
  std::vector<Tensor> features;
  Tensor global_descriptor;
  Tensor logits;
};

/// Residual backbone with N stages. Stage 1 keeps the input resolution and
/// each further stage halves it.
class Backbone : public Module {
 public:
  Backbone(BackboneSpec spec, Initializer& init);

  BlockFeatures forward(const Tensor& batch, Mode mode);
  const BackboneSpec& spec() const { return spec_; }
  std::size_t descriptor_dim() const { return spec_.channels_per_block.back(); }

 private:
  BackboneSpec spec_;
  Conv2d* stem_;
  std::vector<std::vector<PreActUnit*>> stages_;
  BatchNorm2d* final_bn_;
  Linear* classifier_;
};

std::unique_ptr<Backbone> build_backbone(const BackboneSpec& spec, std::uint64_t seed,
                                         DType dtype = DType::f32);

struct DiscriminatorOutput {
  /// [B,1], sigmoid of the first output unit.
  Tensor real_score;
  /// [B,C], raw class logits.
  Tensor class_logits;
};

/// Three dense layers, hidden widths equal to the input width, output width
/// 1 + C. Hidden activations are ReLU.
class Discriminator : public Module {
 public:
  Discriminator(std::size_t input_dim, std::size_t num_classes, Initializer& init);

  DiscriminatorOutput forward(const Tensor& logits) const;
  std::vector<std::size_t> layer_widths() const;
  std::size_t num_classes() const { return num_classes_; }
  Linear& output_layer() { return *layers_.back(); }

 private:
  std::size_t num_classes_;
  std::vector<Linear*> layers_;
};

std::unique_ptr<Discriminator> build_discriminator(std::size_t input_dim, std::size_t num_classes,
                                                   std::uint64_t seed, DType dtype = DType::f32);

/// One dense layer from the concatenated descriptors to class logits, used
/// only while the teacher is pretrained.
class AuxHead : public Module {
 public:
  AuxHead(std::size_t descriptor_dim, std::size_t num_classes, Initializer& init);
  Tensor logits(const Tensor& descriptors) const;
  Tensor probabilities(const Tensor& descriptors) const;

 private:
  Linear* fc_;
};

std::unique_ptr<AuxHead> build_aux_head(std::size_t descriptor_dim, std::size_t num_classes,
                                        std::uint64_t seed, DType dtype = DType::f32);

/// Dense ReLU network; the last layer is linear.
class Mlp : public Module {
 public:
  Mlp(const std::vector<std::size_t>& widths, Initializer& init);
  Tensor forward(const Tensor& x) const;

 private:
  std::vector<Linear*> layers_;
};

}  // namespace ksanc
