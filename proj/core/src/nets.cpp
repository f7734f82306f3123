#include "ksanc/nets.hpp"

#include <cmath>
#include <sstream>

namespace ksanc {

Tensor Initializer::fan_in_normal(Shape shape, std::size_t fan_in) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n);
  for (auto& v : values) v = dist(rng_);
  return Tensor::from_values(std::move(shape), values, dtype_);
}

// Module -------------------------------------------------------------------

Tensor Module::register_parameter(std::string name, Tensor tensor) {
  tensor.set_requires_grad(true);
  params_.emplace_back(std::move(name), tensor);
  return tensor;
}

Tensor Module::register_buffer(std::string name, Tensor tensor) {
  buffers_.emplace_back(std::move(name), tensor);
  return tensor;
}

void Module::collect(const std::string& prefix, bool params, std::vector<Parameter>& out) const {
  for (const auto& [name, t] : params ? params_ : buffers_) out.push_back({prefix + name, t});
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", params, out);
}

std::vector<Parameter> Module::parameters() const {
  std::vector<Parameter> out;
  collect("", true, out);
  return out;
}

std::vector<Parameter> Module::buffers() const {
  std::vector<Parameter> out;
  collect("", false, out);
  return out;
}

std::vector<Parameter> Module::state() const {
  auto out = parameters();
  auto bufs = buffers();
  out.insert(out.end(), bufs.begin(), bufs.end());
  return out;
}

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

void Module::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(trainable);
}

void Module::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

// Layers -------------------------------------------------------------------

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
               std::size_t stride, std::size_t padding, Initializer& init)
    : options_{stride, padding} {
  weight_ = register_parameter(
      "weight", init.fan_in_normal({out_channels, in_channels, kernel, kernel},
                                   in_channels * kernel * kernel));
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight_, options_); }

Linear::Linear(std::size_t in_features, std::size_t out_features, Initializer& init) {
  weight_ = register_parameter("weight", init.fan_in_normal({in_features, out_features}, in_features));
  bias_ = register_parameter("bias", init.zeros({out_features}));
}

Tensor Linear::forward(const Tensor& x) const { return dense(x, weight_, bias_); }

BatchNorm2d::BatchNorm2d(std::size_t channels, Initializer& init) {
  gamma_ = register_parameter("gamma", init.ones({channels}));
  beta_ = register_parameter("beta", init.zeros({channels}));
  running_mean_ = register_buffer("running_mean", init.zeros({channels}));
  running_var_ = register_buffer("running_var", init.ones({channels}));
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  return batch_norm(x, gamma_, beta_, running_mean_, running_var_,
                    BatchNormOptions{mode == Mode::train, 0.9, 1e-5});
}

PreActUnit::PreActUnit(std::size_t in_channels, std::size_t out_channels, std::size_t stride,
                       Initializer& init) {
  bn1_ = &register_module("bn1", std::make_unique<BatchNorm2d>(in_channels, init));
  conv1_ = &register_module("conv1",
                            std::make_unique<Conv2d>(in_channels, out_channels, 3, stride, 1, init));
  bn2_ = &register_module("bn2", std::make_unique<BatchNorm2d>(out_channels, init));
  conv2_ = &register_module("conv2",
                            std::make_unique<Conv2d>(out_channels, out_channels, 3, 1, 1, init));
  if (stride != 1 || in_channels != out_channels) {
    shortcut_ = &register_module(
        "shortcut", std::make_unique<Conv2d>(in_channels, out_channels, 1, stride, 0, init));
  }
}

Tensor PreActUnit::forward(const Tensor& x, Mode mode) {
  const Tensor pre = relu(bn1_->forward(x, mode));
  const Tensor identity = shortcut_ ? shortcut_->forward(pre) : x;
  Tensor h = conv1_->forward(pre);
  h = conv2_->forward(relu(bn2_->forward(h, mode)));
  return add(h, identity);
}

// Backbone -----------------------------------------------------------------

void BackboneSpec::validate() const {
  if (num_blocks < 1) throw ConfigError("backbone: num_blocks must be >= 1");
  if (channels_per_block.size() != num_blocks) {
    throw ConfigError("backbone: channels_per_block has " +
                      std::to_string(channels_per_block.size()) + " entries, num_blocks is " +
                      std::to_string(num_blocks));
  }
  if (layers_per_block.size() != num_blocks) {
    throw ConfigError("backbone: layers_per_block has " + std::to_string(layers_per_block.size()) +
                      " entries, num_blocks is " + std::to_string(num_blocks));
  }
  for (auto c : channels_per_block)
    if (c == 0) throw ConfigError("backbone: block channel counts must be positive");
  for (auto l : layers_per_block)
    if (l == 0) throw ConfigError("backbone: every block needs at least one residual unit");
  if (num_classes < 2) throw ConfigError("backbone: num_classes must be >= 2");
  if (input_shape.size() != 3 || input_shape[0] == 0) {
    throw ConfigError("backbone: input_shape must be [channels, height, width]");
  }
  const std::size_t min_side = std::size_t{1} << (num_blocks - 1);
  if (input_shape[1] < min_side || input_shape[2] < min_side) {
    throw ConfigError("backbone: input " + std::to_string(input_shape[1]) + "x" +
                      std::to_string(input_shape[2]) + " too small for " +
                      std::to_string(num_blocks - 1) + " downsamplings (needs at least " +
                      std::to_string(min_side) + "x" + std::to_string(min_side) + ")");
  }
}

std::string BackboneSpec::to_string() const {
  auto list = [](const std::vector<std::size_t>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
  };
  std::ostringstream os;
  os << "blocks=" << num_blocks << ";channels=" << list(channels_per_block)
     << ";units=" << list(layers_per_block) << ";classes=" << num_classes
     << ";input=" << list(input_shape);
  return os.str();
}

Backbone::Backbone(BackboneSpec spec, Initializer& init) : spec_(std::move(spec)) {
  spec_.validate();
  const auto& ch = spec_.channels_per_block;
  stem_ = &register_module("stem",
                           std::make_unique<Conv2d>(spec_.input_shape[0], ch[0], 3, 1, 1, init));
  std::size_t in = ch[0];
  for (std::size_t b = 0; b < spec_.num_blocks; ++b) {
    stages_.emplace_back();
    for (std::size_t u = 0; u < spec_.layers_per_block[b]; ++u) {
      const std::size_t stride = (b > 0 && u == 0) ? 2 : 1;
      auto name = "block" + std::to_string(b + 1) + ".unit" + std::to_string(u);
      stages_.back().push_back(
          &register_module(std::move(name), std::make_unique<PreActUnit>(in, ch[b], stride, init)));
      in = ch[b];
    }
  }
  final_bn_ = &register_module("final_bn", std::make_unique<BatchNorm2d>(in, init));
  classifier_ = &register_module("classifier",
                                 std::make_unique<Linear>(in, spec_.num_classes, init));
}

BlockFeatures Backbone::forward(const Tensor& batch, Mode mode) {
  const auto& in = spec_.input_shape;
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] ||
      batch.dim(3) != in[2]) {
    throw ShapeError("backbone: batch shape " + shape_str(batch.shape()) +
                     " does not match input shape [B," + std::to_string(in[0]) + "," +
                     std::to_string(in[1]) + "," + std::to_string(in[2]) + "]");
  }
  BlockFeatures out;
  Tensor h = stem_->forward(batch);
  for (auto& stage : stages_) {
    for (auto* unit : stage) h = unit->forward(h, mode);
    out.features.push_back(h);
  }
  out.global_descriptor = global_average_pool(relu(final_bn_->forward(h, mode)));
  out.logits = classifier_->forward(out.global_descriptor);
  return out;
}

std::unique_ptr<Backbone> build_backbone(const BackboneSpec& spec, std::uint64_t seed,
                                         DType dtype) {
  Initializer init(seed, dtype);
  return std::make_unique<Backbone>(spec, init);
}

// Discriminator ------------------------------------------------------------

Discriminator::Discriminator(std::size_t input_dim, std::size_t num_classes, Initializer& init)
    : num_classes_(num_classes) {
  if (input_dim < 1) throw ConfigError("discriminator: input_dim must be >= 1");
  layers_.push_back(&register_module("fc1", std::make_unique<Linear>(input_dim, input_dim, init)));
  layers_.push_back(&register_module("fc2", std::make_unique<Linear>(input_dim, input_dim, init)));
  layers_.push_back(
      &register_module("fc3", std::make_unique<Linear>(input_dim, 1 + num_classes, init)));
}

DiscriminatorOutput Discriminator::forward(const Tensor& logits) const {
  Tensor h = relu(layers_[0]->forward(logits));
  h = relu(layers_[1]->forward(h));
  h = layers_[2]->forward(h);
  return {sigmoid(slice(h, 1, 0, 1)), slice(h, 1, 1, 1 + num_classes_)};
}

std::vector<std::size_t> Discriminator::layer_widths() const {
  std::vector<std::size_t> widths{layers_.front()->in_features()};
  for (const auto* l : layers_) widths.push_back(l->out_features());
  return widths;
}

std::unique_ptr<Discriminator> build_discriminator(std::size_t input_dim, std::size_t num_classes,
                                                   std::uint64_t seed, DType dtype) {
  Initializer init(seed, dtype);
  return std::make_unique<Discriminator>(input_dim, num_classes, init);
}

// Heads --------------------------------------------------------------------

AuxHead::AuxHead(std::size_t descriptor_dim, std::size_t num_classes, Initializer& init) {
  fc_ = &register_module("fc", std::make_unique<Linear>(descriptor_dim, num_classes, init));
}

Tensor AuxHead::logits(const Tensor& descriptors) const { return fc_->forward(descriptors); }

Tensor AuxHead::probabilities(const Tensor& descriptors) const {
  return softmax(logits(descriptors), 1);
}

std::unique_ptr<AuxHead> build_aux_head(std::size_t descriptor_dim, std::size_t num_classes,
                                        std::uint64_t seed, DType dtype) {
  Initializer init(seed, dtype);
  return std::make_unique<AuxHead>(descriptor_dim, num_classes, init);
}

Mlp::Mlp(const std::vector<std::size_t>& widths, Initializer& init) {
  if (widths.size() < 2) throw ConfigError("mlp: needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers_.push_back(&register_module("fc" + std::to_string(i + 1),
                                       std::make_unique<Linear>(widths[i], widths[i + 1], init)));
  }
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h);
    if (i + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

}  // namespace ksanc
