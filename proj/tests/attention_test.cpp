#include <gtest/gtest.h>

#include <cmath>

#include "attention_oracle.hpp"
#include "gradcheck.hpp"
#include "ksanc/attention.hpp"

using namespace ksanc;
using ksanc::testing::loop_descriptor;
using ksanc::testing::random_tensor;

namespace {

void fill(const Tensor& t, std::initializer_list<double> values) {
  Tensor h = t;
  std::size_t i = 0;
  for (double v : values) h.set_value(i++, v);
}

}  // namespace

TEST(Attention, SoftmaxMapSumsToOne) {
  std::mt19937_64 rng(1);
  Initializer init(2, DType::f64);
  AttentionEstimator est(6, 5, 4, init);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor L = random_tensor({2, 6, 3, 4}, rng, -3, 3, false);
    const Tensor g = random_tensor({2, 5}, rng, -3, 3, false);
    const auto r = squeeze_block_detailed(L, g, est);
    EXPECT_EQ(r.attention.shape(), (Shape{2, 1, 3, 4}));
    for (std::size_t b = 0; b < 2; ++b) {
      double s = 0;
      for (std::size_t p = 0; p < 12; ++p) s += r.attention.value(b * 12 + p);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Attention, MatchesLoopOracle) {
  std::mt19937_64 rng(7);
  for (auto [C, D, K] : {std::tuple{5, 4, 3}, {3, 6, 3}, {8, 2, 16}}) {
    Initializer init(rng(), DType::f64);
    AttentionEstimator est(C, D, K, init);
    EXPECT_EQ(est.projection_kernel().defined(), C != K);
    const Tensor L = random_tensor({3, std::size_t(C), 4, 3}, rng, -2, 2, false);
    const Tensor g = random_tensor({3, std::size_t(D)}, rng, -2, 2, false);
    const auto got = squeeze_block(L, g, est).to_vector();
    const auto want = loop_descriptor(L, g, est);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
  }
}

TEST(Attention, ZeroScoreKernelGivesUniformAverage) {
  std::mt19937_64 rng(3);
  Initializer init(4, DType::f64);
  AttentionEstimator est(3, 2, 3, init);
  Tensor score = est.score_kernel();
  score.assign(Tensor::zeros(score.shape(), DType::f64));
  const Tensor L = random_tensor({1, 3, 2, 2}, rng, -1, 1, false);
  const Tensor g = random_tensor({1, 2}, rng, -1, 1, false);
  const auto r = squeeze_block_detailed(L, g, est);
  for (double a : r.attention.to_vector()) EXPECT_DOUBLE_EQ(a, 0.25);
  for (std::size_t k = 0; k < 3; ++k) {
    double gap = 0;
    for (std::size_t p = 0; p < 4; ++p) gap += L.value(k * 4 + p) / 4;
    const double aligned = est.align_kernel().value(k * 2) * g.value(0) +
                           est.align_kernel().value(k * 2 + 1) * g.value(1);
    // Uniform weights 1/4, then the 2x2 average: (mean + aligned) / 4.
    EXPECT_NEAR(r.descriptor.value(k), (gap + aligned) / 4, 1e-12);
  }
}

TEST(Attention, ConcentratedHandCase) {
  // One channel, 2x2 map [0,0,0,ln3], zero descriptor, unit score weight:
  // the peak gets e^ln3 / (3 + e^ln3) = 1/2 of the mass, and average
  // pooling of [0,0,0,ln3/2] gives ln3/8.
  Initializer init(1, DType::f64);
  AttentionEstimator est(1, 1, 1, init);
  fill(est.score_kernel(), {1.0});
  const double l3 = std::log(3.0);
  const Tensor L = Tensor::from_values({1, 1, 2, 2}, {0, 0, 0, l3}, DType::f64);
  const auto r = squeeze_block_detailed(L, Tensor::zeros({1, 1}, DType::f64), est);
  EXPECT_NEAR(r.attention.value(3), 0.5, 1e-15);
  EXPECT_NEAR(r.attention.value(0), 1.0 / 6, 1e-15);
  EXPECT_NEAR(r.descriptor.item(), l3 / 8, 1e-15);
}

TEST(Attention, ZeroInputsGiveZeroDescriptor) {
  Initializer init(5, DType::f64);
  AttentionEstimator est(4, 3, 2, init);
  const auto d = squeeze_block(Tensor::zeros({2, 4, 3, 3}, DType::f64), Tensor::zeros({2, 3}, DType::f64), est);
  for (double v : d.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, InvariantToSpatialPermutation) {
  std::mt19937_64 rng(9);
  Initializer init(6, DType::f64);
  AttentionEstimator est(3, 2, 3, init);
  const Tensor L = random_tensor({1, 3, 2, 3}, rng, -1, 1, false);
  const Tensor g = random_tensor({1, 2}, rng, -1, 1, false);
  // Reverse the 6 positions of every channel.
  std::vector<double> rev(18);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 6; ++p) rev[c * 6 + p] = L.value(c * 6 + 5 - p);
  const Tensor Lr = Tensor::from_values({1, 3, 2, 3}, rev, DType::f64);
  const auto a = squeeze_block(L, g, est).to_vector(), b = squeeze_block(Lr, g, est).to_vector();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Attention, ShapeErrorsNameDims) {
  Initializer init(1, DType::f64);
  AttentionEstimator est(4, 3, 2, init);
  EXPECT_THROW(squeeze_block(Tensor::zeros({2, 5, 3, 3}, DType::f64), Tensor::zeros({2, 3}, DType::f64), est),
               ShapeError);
  EXPECT_THROW(squeeze_block(Tensor::zeros({2, 4, 3, 3}, DType::f64), Tensor::zeros({2, 2}, DType::f64), est),
               ShapeError);
  EXPECT_THROW(squeeze_block(Tensor::zeros({2, 4, 3, 3}, DType::f64), Tensor::zeros({1, 3}, DType::f64), est),
               ShapeError);
}

TEST(AttentionSubnet, DescriptorWidthIsSumOfOutputs) {
  BackboneSpec spec;
  spec.channels_per_block = {8, 16, 32};
  spec.num_classes = 4;
  spec.input_shape = {3, 8, 8};
  auto net = build_backbone(spec, 1);
  auto att = build_attention(*net, {8, 16, 32}, 2);
  EXPECT_EQ(att->output_dim(), 56u);
  const auto bf = net->forward(Tensor::zeros({2, 3, 8, 8}), Mode::train);
  const auto sq = att->forward(bf);
  EXPECT_EQ(sq.per_block.size(), 3u);
  EXPECT_EQ(sq.concatenated.shape(), (Shape{2, 56}));

  auto narrow = build_attention(*net, {4, 4, 4}, 2);
  EXPECT_EQ(narrow->forward(bf).concatenated.shape(), (Shape{2, 12}));
}

TEST(AttentionSubnet, EstimatorCountMustMatchBlocks) {
  BackboneSpec spec;
  spec.input_shape = {1, 8, 8};
  auto net = build_backbone(spec, 1);
  auto att = build_attention(*net, {8, 16, 32}, 2);
  const auto bf = net->forward(Tensor::zeros({2, 1, 8, 8}), Mode::train);
  auto ests = att->estimators();
  ests.pop_back();
  EXPECT_THROW(squeeze_all(bf, ests), ShapeError);
}
