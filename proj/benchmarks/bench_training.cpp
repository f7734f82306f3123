#include <benchmark/benchmark.h>

#include "ksanc/ops.hpp"
#include "ksanc/trainer.hpp"

using namespace ksanc;

namespace {

RunConfig bench_config() {
  return RunConfig::parse(
      "dataset = synthetic\noutput = unused\nsynth_train_samples = 256\nsynth_test_samples = 64\n"
      "batch_size = 64\nepochs = 1\nteacher_epochs = 1\nlr_student = 0.02\n");
}

}  // namespace

static void BM_BackboneForward(benchmark::State& state) {
  const auto c = bench_config();
  auto net = state.range(0) ? build_teacher(c, 1) : build_student(c, 1);
  const auto data = load_data(c);
  const Tensor x = prepare_images(slice(data.train.images, 0, 0, 64), data.train.stats, nullptr, nullptr,
                                  c.dtype);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(net.backbone->forward(x, Mode::eval).logits);
  state.SetLabel(state.range(0) ? "teacher" : "student");
}
BENCHMARK(BM_BackboneForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

// One epoch of 256 images: discriminator then student step per batch.
static void BM_DistillEpoch(benchmark::State& state) {
  const auto c = bench_config();
  const auto data = load_data(c);
  auto teacher = build_teacher(c, 2);
  for (auto _ : state) {
    StudentTrainer t(c, data, &teacher, 3);
    t.run_epoch();
  }
}
BENCHMARK(BM_DistillEpoch)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
