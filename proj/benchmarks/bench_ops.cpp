#include <benchmark/benchmark.h>

#include <random>

#include "ksanc/attention.hpp"
#include "ksanc/ops.hpp"

using namespace ksanc;

namespace {

Tensor random(Shape shape, std::uint64_t seed, DType dtype = DType::f32) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from_values(std::move(shape), v, dtype);
}

}  // namespace

// args: batch, channels, spatial
static void BM_Conv2dForward(benchmark::State& state) {
  const auto B = state.range(0), C = state.range(1), S = state.range(2);
  const Tensor x = random({std::size_t(B), std::size_t(C), std::size_t(S), std::size_t(S)}, 1);
  const Tensor w = random({std::size_t(C), std::size_t(C), 3, 3}, 2);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, {1, 1}));
  state.SetItemsProcessed(state.iterations() * B * C * C * S * S * 9);
}
BENCHMARK(BM_Conv2dForward)->Args({16, 8, 16})->Args({16, 16, 8})->Args({64, 16, 16})->Args({64, 32, 8});

static void BM_Conv2dBackward(benchmark::State& state) {
  const auto B = state.range(0), C = state.range(1), S = state.range(2);
  Tensor x = random({std::size_t(B), std::size_t(C), std::size_t(S), std::size_t(S)}, 1);
  Tensor w = random({std::size_t(C), std::size_t(C), 3, 3}, 2);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    sum(conv2d(x, w, {1, 1})).backward();
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({16, 8, 16})->Args({64, 16, 16});

static void BM_Matmul(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  const Tensor a = random({n, n}, 3), b = random({n, n}, 4);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->RangeMultiplier(4)->Range(16, 256);

static void BM_Dense(benchmark::State& state) {
  const auto B = std::size_t(state.range(0)), D = std::size_t(state.range(1));
  const Tensor x = random({B, D}, 5), w = random({D, D}, 6), b = random({D}, 7);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(dense(x, w, b));
}
BENCHMARK(BM_Dense)->Args({64, 10})->Args({64, 100})->Args({256, 64});

static void BM_SqueezeBlock(benchmark::State& state) {
  const auto C = std::size_t(state.range(0)), S = std::size_t(state.range(1));
  Initializer init(8, DType::f32);
  AttentionEstimator est(C, 32, C, init);
  const Tensor L = random({64, C, S, S}, 9), g = random({64, 32}, 10);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(squeeze_block(L, g, est));
}
BENCHMARK(BM_SqueezeBlock)->Args({8, 16})->Args({16, 8})->Args({32, 4});
