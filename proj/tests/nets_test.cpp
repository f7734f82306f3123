#include <gtest/gtest.h>

#include "ksanc/nets.hpp"

using namespace ksanc;

namespace {

BackboneSpec small_spec() {
  BackboneSpec s;
  s.channels_per_block = {4, 8, 16};
  s.layers_per_block = {1, 2, 1};
  s.num_classes = 3;
  s.input_shape = {2, 8, 8};
  return s;
}

Tensor random_batch(std::size_t b, const BackboneSpec& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  std::vector<double> v(b * s.input_shape[0] * s.input_shape[1] * s.input_shape[2]);
  for (auto& x : v) x = n(rng);
  return Tensor::from_values({b, s.input_shape[0], s.input_shape[1], s.input_shape[2]}, v);
}

}  // namespace

TEST(Initializer, FanInStandardDeviation) {
  Initializer init(42, DType::f64);
  const Tensor w = init.fan_in_normal({200, 50}, 50);
  double m = 0, v = 0;
  for (double x : w.to_vector()) m += x;
  m /= 10000;
  for (double x : w.to_vector()) v += (x - m) * (x - m);
  v /= 10000;
  EXPECT_NEAR(m, 0.0, 0.01);
  EXPECT_NEAR(v, 2.0 / 50, 0.004);
}

TEST(Backbone, FeatureShapesPerBlock) {
  const auto spec = small_spec();
  auto net = build_backbone(spec, 1);
  const auto out = net->forward(random_batch(3, spec, 2), Mode::train);
  ASSERT_EQ(out.features.size(), 3u);
  EXPECT_EQ(out.features[0].shape(), (Shape{3, 4, 8, 8}));
  EXPECT_EQ(out.features[1].shape(), (Shape{3, 8, 4, 4}));
  EXPECT_EQ(out.features[2].shape(), (Shape{3, 16, 2, 2}));
  EXPECT_EQ(out.global_descriptor.shape(), (Shape{3, 16}));
  EXPECT_EQ(out.logits.shape(), (Shape{3, 3}));
}

TEST(Backbone, FeatureCountEqualsBlockCount) {
  for (std::size_t n : {1u, 2u, 4u}) {
    BackboneSpec s;
    s.num_blocks = n;
    s.channels_per_block.assign(n, 4);
    s.layers_per_block.assign(n, 1);
    s.input_shape = {1, 8, 8};
    auto net = build_backbone(s, 3);
    EXPECT_EQ(net->forward(random_batch(2, s, 4), Mode::train).features.size(), n);
  }
}

TEST(Backbone, SameSeedSameOutput) {
  const auto spec = small_spec();
  auto a = build_backbone(spec, 9), b = build_backbone(spec, 9), c = build_backbone(spec, 10);
  const Tensor x = random_batch(2, spec, 1);
  const auto la = a->forward(x, Mode::eval).logits.to_vector();
  EXPECT_EQ(la, b->forward(x, Mode::eval).logits.to_vector());
  EXPECT_NE(la, c->forward(x, Mode::eval).logits.to_vector());
}

TEST(Backbone, ParameterNamesAreStable) {
  auto net = build_backbone(small_spec(), 1);
  const auto params = net->parameters();
  ASSERT_FALSE(params.empty());
  EXPECT_EQ(params.front().name, "stem.weight");
  EXPECT_EQ(params.back().name, "classifier.bias");
  bool found = false;
  for (const auto& b : net->buffers()) found |= b.name == "block1.unit0.bn1.running_mean";
  EXPECT_TRUE(found);
  EXPECT_EQ(net->state().size(), params.size() + net->buffers().size());
}

TEST(Backbone, ShallowStudentHasFewerParameters) {
  auto spec = small_spec();
  auto student = build_backbone(spec, 1);
  spec.layers_per_block = {3, 3, 3};
  auto teacher = build_backbone(spec, 1);
  EXPECT_LT(student->parameter_count(), teacher->parameter_count());
}

TEST(Backbone, EvalModeDoesNotTouchRunningStats) {
  const auto spec = small_spec();
  auto net = build_backbone(spec, 1);
  const auto before = net->buffers()[0].tensor.to_vector();
  net->forward(random_batch(2, spec, 3), Mode::eval);
  EXPECT_EQ(net->buffers()[0].tensor.to_vector(), before);
  net->forward(random_batch(2, spec, 3), Mode::train);
  EXPECT_NE(net->buffers()[0].tensor.to_vector(), before);
}

TEST(Backbone, WrongInputShapeThrows) {
  auto net = build_backbone(small_spec(), 1);
  EXPECT_THROW(net->forward(Tensor::zeros({2, 3, 8, 8}), Mode::eval), ShapeError);
  EXPECT_THROW(net->forward(Tensor::zeros({2, 2, 9, 8}), Mode::eval), ShapeError);
}

TEST(BackboneSpec, ValidateRejectsInconsistentSpecs) {
  auto s = small_spec();
  s.channels_per_block = {4, 8};
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.input_shape = {2, 3, 3};
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.num_classes = 1;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Discriminator, WidthsFollowInputAndClasses) {
  for (std::size_t c : {2u, 4u, 10u}) {
    auto d = build_discriminator(c, c, 5);
    EXPECT_EQ(d->layer_widths(), (std::vector<std::size_t>{c, c, c, 1 + c}));
    const auto out = d->forward(Tensor::zeros({3, c}));
    EXPECT_EQ(out.real_score.shape(), (Shape{3, 1}));
    EXPECT_EQ(out.class_logits.shape(), (Shape{3, c}));
  }
}

TEST(Discriminator, ZeroOutputLayerGivesHalfScore) {
  auto d = build_discriminator(4, 4, 5, DType::f64);
  Linear& last = d->output_layer();
  Tensor w = last.weight(), b = last.bias();
  w.assign(Tensor::zeros(w.shape(), DType::f64));
  b.assign(Tensor::zeros(b.shape(), DType::f64));
  const auto out = d->forward(Tensor::full({2, 4}, 3.0, DType::f64));
  for (double s : out.real_score.to_vector()) EXPECT_DOUBLE_EQ(s, 0.5);
  for (double l : out.class_logits.to_vector()) EXPECT_DOUBLE_EQ(l, 0.0);
}

TEST(Discriminator, RejectsWrongInputWidth) {
  auto d = build_discriminator(4, 4, 5);
  EXPECT_THROW(d->forward(Tensor::zeros({2, 3})), ShapeError);
}

TEST(AuxHead, ParameterCountAndProbabilities) {
  auto h = build_aux_head(12, 4, 1, DType::f64);
  // 12*4 weights + 4 biases; a hand count.
  EXPECT_EQ(h->parameter_count(), 52u);
  const auto p = h->probabilities(Tensor::full({2, 12}, 0.3, DType::f64)).to_vector();
  EXPECT_NEAR(p[0] + p[1] + p[2] + p[3], 1.0, 1e-12);
}

TEST(Module, SetTrainableTogglesGradients) {
  auto d = build_discriminator(3, 3, 1);
  d->set_trainable(false);
  for (const auto& p : d->parameters()) EXPECT_FALSE(p.tensor.requires_grad());
  d->set_trainable(true);
  for (const auto& p : d->parameters()) EXPECT_TRUE(p.tensor.requires_grad());
}

TEST(Mlp, ShapesAndLinearLastLayer) {
  Initializer init(1, DType::f64);
  Mlp m({3, 5, 2}, init);
  EXPECT_EQ(m.parameter_count(), 3u * 5 + 5 + 5 * 2 + 2);
  const auto y = m.forward(Tensor::full({4, 3}, -10.0, DType::f64));
  EXPECT_EQ(y.shape(), (Shape{4, 2}));
}
