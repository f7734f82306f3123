#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "gradient_cases.hpp"
#include "ksanc/ops.hpp"
#include "ksanc/tensor.hpp"

using namespace ksanc;
using ksanc::testing::random_tensor;

namespace {

// Direct 7-loop convolution with zero padding.
std::vector<double> naive_conv(const Tensor& x, const Tensor& k, std::size_t stride,
                               std::size_t pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto K = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(B * K * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < K; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = long(i * stride + u) - long(pad);
                const long q = long(j * stride + v) - long(pad);
                if (r < 0 || q < 0 || r >= long(H) || q >= long(W)) continue;
                acc += x.value(((b * C + c) * H + r) * W + q) * k.value(((o * C + c) * kh + u) * kw + v);
              }
          out[((b * K + o) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

}  // namespace

TEST(Tensor, FactoriesAndAccessors) {
  const Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6}, DType::f64);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_DOUBLE_EQ(t.value(4), 5.0);
  EXPECT_THROW(t.dim(2), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
  EXPECT_THROW(Tensor::from_values({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_EQ(Tensor::full({3}, 2.5).to_vector(), (std::vector<double>{2.5, 2.5, 2.5}));
  EXPECT_THROW(Tensor().shape(), Error);
}

TEST(Tensor, DtypeConversionAndParse) {
  const Tensor a = Tensor::from_values({2}, {0.1, 0.2}, DType::f64);
  const Tensor b = a.to(DType::f32);
  EXPECT_EQ(b.dtype(), DType::f32);
  EXPECT_FLOAT_EQ(static_cast<float>(b.value(0)), 0.1f);
  EXPECT_EQ(parse_dtype("f64"), DType::f64);
  EXPECT_THROW(parse_dtype("f16"), ConfigError);
}

TEST(Ops, ElementwiseValues) {
  const Tensor a = Tensor::from_values({2, 2}, {1, -2, 3, -4}, DType::f64);
  const Tensor b = Tensor::from_values({1, 2}, {10, 20}, DType::f64);
  EXPECT_EQ(add(a, b).to_vector(), (std::vector<double>{11, 18, 13, 16}));
  EXPECT_EQ(sub(a, b).to_vector(), (std::vector<double>{-9, -22, -7, -24}));
  EXPECT_EQ(mul(a, b).to_vector(), (std::vector<double>{10, -40, 30, -80}));
  EXPECT_EQ(relu(a).to_vector(), (std::vector<double>{1, 0, 3, 0}));
  EXPECT_EQ(abs(a).to_vector(), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(square(a).to_vector(), (std::vector<double>{1, 4, 9, 16}));
  EXPECT_EQ(clamp(a, -1, 2).to_vector(), (std::vector<double>{1, -1, 2, -1}));
  EXPECT_EQ(scale(a, 0.5).to_vector(), (std::vector<double>{0.5, -1, 1.5, -2}));
  EXPECT_DOUBLE_EQ(sum(a).item(), -2.0);
  EXPECT_DOUBLE_EQ(mean(a).item(), -0.5);
  EXPECT_DOUBLE_EQ(l2_norm_sq(a).item(), 30.0);
  EXPECT_EQ(sum(a, 0).to_vector(), (std::vector<double>{4, -6}));
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0, DType::f64)).item(), 0.5);
}

TEST(Ops, BroadcastMismatchThrows) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({3, 2});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Ops, SoftmaxKnownValues) {
  const Tensor x = Tensor::from_values({1, 2}, {0.0, std::log(3.0)}, DType::f64);
  const auto p = softmax(x, 1).to_vector();
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
  const auto lp = log_softmax(x, 1).to_vector();
  EXPECT_NEAR(lp[0], std::log(0.25), 1e-14);

  // Large logits must not overflow.
  const Tensor big = Tensor::from_values({1, 3}, {1000, 1000, 1000}, DType::f64);
  for (double v : softmax(big, 1).to_vector()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({7, 5}, rng, -10, 10, false);
  const Tensor p = softmax(x, 1);
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += p.value(r * 5 + c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, MatmulMatchesNaive) {
  std::mt19937_64 rng(11);
  const Tensor a = random_tensor({5, 7}, rng, -1, 1, false);
  const Tensor b = random_tensor({7, 3}, rng, -1, 1, false);
  const auto got = matmul(a, b).to_vector();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 7; ++k) acc += a.value(i * 7 + k) * b.value(k * 3 + j);
      EXPECT_NEAR(got[i * 3 + j], acc, 1e-12);
    }
}

TEST(Ops, DenseAddsBias) {
  const Tensor x = Tensor::from_values({1, 2}, {1, 2}, DType::f64);
  const Tensor w = Tensor::from_values({2, 2}, {1, 0, 0, 1}, DType::f64);
  const Tensor b = Tensor::from_values({2}, {0.5, -0.5}, DType::f64);
  EXPECT_EQ(dense(x, w, b).to_vector(), (std::vector<double>{1.5, 1.5}));
}

struct ConvCase {
  Shape input, kernel;
  std::size_t stride, pad;
};

class ConvOracle : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvOracle, MatchesNestedLoops) {
  const auto& c = GetParam();
  std::mt19937_64 rng(c.stride * 31 + c.pad);
  const Tensor x = random_tensor(c.input, rng, -1, 1, false);
  const Tensor k = random_tensor(c.kernel, rng, -1, 1, false);
  const auto got = conv2d(x, k, {c.stride, c.pad}).to_vector();
  const auto want = naive_conv(x, k, c.stride, c.pad);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10) << i;
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvOracle,
                         ::testing::Values(ConvCase{{2, 3, 8, 8}, {4, 3, 3, 3}, 1, 1},
                                           ConvCase{{1, 2, 7, 9}, {3, 2, 3, 3}, 2, 1},
                                           ConvCase{{2, 4, 5, 5}, {2, 4, 1, 1}, 1, 0},
                                           ConvCase{{1, 1, 6, 6}, {1, 1, 3, 3}, 2, 0},
                                           ConvCase{{3, 2, 4, 4}, {5, 2, 1, 1}, 2, 0}));

TEST(Ops, ConvShapeErrors) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({2, 2, 3, 3})), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3})), ShapeError);
  EXPECT_EQ(conv_output_size(16, 3, 2, 1), 8u);
}

TEST(Ops, GlobalAveragePool) {
  const Tensor x = Tensor::from_values({1, 2, 2, 2}, {1, 2, 3, 4, 10, 10, 10, 14}, DType::f64);
  EXPECT_EQ(global_average_pool(x).to_vector(), (std::vector<double>{2.5, 11}));
}

TEST(Ops, ReshapeSliceConcatPick) {
  const Tensor x = Tensor::from_values({2, 3}, {0, 1, 2, 3, 4, 5}, DType::f64);
  EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4, 2}), ShapeError);
  EXPECT_EQ(slice(x, 1, 1, 3).to_vector(), (std::vector<double>{1, 2, 4, 5}));
  const Tensor parts[] = {x, slice(x, 1, 0, 1)};
  EXPECT_EQ(concat(parts, 1).to_vector(), (std::vector<double>{0, 1, 2, 0, 3, 4, 5, 3}));
  const int labels[] = {2, 0};
  EXPECT_EQ(pick(x, labels).to_vector(), (std::vector<double>{2, 3}));
  const int bad[] = {3, 0};
  EXPECT_THROW(pick(x, bad), Error);
}

TEST(Ops, CrossEntropyUniformLogits) {
  const Tensor x = Tensor::zeros({3, 4}, DType::f64);
  const int labels[] = {0, 1, 3};
  EXPECT_NEAR(cross_entropy(x, labels).item(), std::log(4.0), 1e-15);
  EXPECT_NEAR(binary_cross_entropy(Tensor::full({2, 1}, 0.5, DType::f64), 1.0).item(),
              std::log(2.0), 1e-15);
}

TEST(Ops, BatchNormTrainingNormalizesAndUpdatesRunning) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({4, 2, 3, 3}, rng, -2, 3, false);
  const Tensor g = Tensor::full({2}, 1.0, DType::f64), b = Tensor::zeros({2}, DType::f64);
  Tensor rm = Tensor::zeros({2}, DType::f64), rv = Tensor::full({2}, 1.0, DType::f64);
  const Tensor y = batch_norm(x, g, b, rm, rv, {true, 0.9, 0.0});
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0, xm = 0, xv = 0;
    std::vector<double> xs;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) {
        const std::size_t idx = (n * 2 + c) * 9 + i;
        m += y.value(idx);
        xm += x.value(idx);
        xs.push_back(x.value(idx));
      }
    m /= 36;
    xm /= 36;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) v += std::pow(y.value((n * 2 + c) * 9 + i) - m, 2);
    for (double s : xs) xv += (s - xm) * (s - xm);
    xv /= 36;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 36, 1.0, 1e-12);
    EXPECT_NEAR(rm.value(c), 0.1 * xm, 1e-12);
    EXPECT_NEAR(rv.value(c), 0.9 + 0.1 * xv, 1e-12);
  }
}

TEST(Ops, BatchNormEvalIdentityStatistics) {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({2, 3, 2, 2}, rng, -1, 1, false);
  const Tensor g = Tensor::full({3}, 1.0, DType::f64), b = Tensor::zeros({3}, DType::f64);
  Tensor rm = Tensor::zeros({3}, DType::f64), rv = Tensor::full({3}, 1.0, DType::f64);
  const auto y = batch_norm(x, g, b, rm, rv, {false, 0.9, 0.0}).to_vector();
  const auto xv = x.to_vector();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_DOUBLE_EQ(y[i], xv[i]);
  EXPECT_DOUBLE_EQ(rm.value(0), 0.0);
}

TEST(Autograd, LeafGradientsAccumulate) {
  Tensor x = Tensor::from_values({2}, {1, 2}, DType::f64);
  x.set_requires_grad(true);
  sum(square(x)).backward();
  sum(square(x)).backward();
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{4, 8}));
  x.zero_grad();
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{0, 0}));
}

TEST(Autograd, SharedSubexpressionSumsPaths) {
  Tensor x = Tensor::scalar(3.0, DType::f64);
  x.set_requires_grad(true);
  const Tensor y = mul(x, x);
  add(y, y).backward();
  EXPECT_DOUBLE_EQ(x.grad_vector()[0], 12.0);
}

TEST(Autograd, NoGradAndDetachStopRecording) {
  Tensor x = Tensor::scalar(2.0, DType::f64);
  x.set_requires_grad(true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    EXPECT_FALSE(square(x).requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(x.detach().requires_grad());
  const Tensor y = add(square(x), x.detach());
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad_vector()[0], 4.0);
}

TEST(Autograd, BackwardPreconditions) {
  Tensor x = Tensor::zeros({2}, DType::f64);
  EXPECT_THROW(sum(x).backward(), Error);
  x.set_requires_grad(true);
  EXPECT_THROW(square(x).backward(), ShapeError);
}

TEST(Autograd, SinglePrecisionMatchesDouble) {
  std::mt19937_64 rng(8);
  const Tensor x64 = random_tensor({2, 2, 5, 5}, rng, -1, 1, true);
  const Tensor k64 = random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
  Tensor x32 = x64.to(DType::f32), k32 = k64.to(DType::f32);
  x32.set_requires_grad(true);
  k32.set_requires_grad(true);
  sum(square(conv2d(x64, k64, {1, 1}))).backward();
  sum(square(conv2d(x32, k32, {1, 1}))).backward();
  const auto g64 = k64.grad_vector(), g32 = k32.grad_vector();
  for (std::size_t i = 0; i < g64.size(); ++i) EXPECT_NEAR(g32[i], g64[i], 1e-3 * (1 + std::abs(g64[i])));
}

class GradientSuite : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientSuite, CentralDifferences) {
  const auto cases = ksanc::testing::gradient_cases();
  const auto& c = cases[GetParam()];
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed * 7919 + GetParam());
    auto [f, inputs] = c.make(rng);
    const auto r = ksanc::testing::check_gradients(f, inputs);
    ASSERT_GT(r.checked, 0u) << c.name;
    EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " seed " << seed << ": " << r.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(AllCases, GradientSuite,
                         ::testing::Range<std::size_t>(0, ksanc::testing::gradient_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return ksanc::testing::gradient_cases()[info.param].name;
                         });
