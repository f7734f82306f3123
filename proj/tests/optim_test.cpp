#include <gtest/gtest.h>

#include "ksanc/optim.hpp"

using namespace ksanc;

namespace {

Parameter make_param(std::vector<double> v) {
  Tensor t = Tensor::from_values({v.size()}, v, DType::f64);
  t.set_requires_grad(true);
  return {"w", t};
}

void set_grad(const Tensor& t, std::vector<double> g) {
  auto span = t.grad_data<double>();
  std::copy(g.begin(), g.end(), span.begin());
}

}  // namespace

TEST(Sgd, ZeroGradientZeroWeightIsFixedPoint) {
  auto p = make_param({0, 0});
  Sgd opt({p}, {0.9, 1e-4});
  for (int i = 0; i < 5; ++i) opt.step(0.1);
  EXPECT_EQ(p.tensor.to_vector(), (std::vector<double>{0, 0}));
}

TEST(Sgd, SingleStepHandValue) {
  auto p = make_param({1.0});
  Sgd opt({p}, {0.9, 0.1});
  set_grad(p.tensor, {2.0});
  opt.step(0.5);
  // v = 2 + 0.1*1 = 2.1, w = 1 - 0.5*2.1
  EXPECT_DOUBLE_EQ(p.tensor.value(0), 1 - 0.5 * 2.1);
  EXPECT_DOUBLE_EQ(opt.state()[0].tensor.value(0), 2.1);
  EXPECT_EQ(opt.state()[0].name, "w.velocity");
}

TEST(Sgd, ThreeStepRecurrence) {
  const double m = 0.9, wd = 1e-2, lr = 0.05;
  const std::vector<double> grads{0.3, -1.2, 0.7};
  auto p = make_param({0.4});
  Sgd opt({p}, {m, wd});
  double w = 0.4, v = 0;
  for (double g : grads) {
    p.tensor.zero_grad();
    set_grad(p.tensor, {g});
    opt.step(lr);
    v = m * v + g + wd * w;
    w -= lr * v;
    EXPECT_NEAR(p.tensor.value(0), w, 1e-12);
  }
}

TEST(Sgd, ZeroGradClearsParameterGradients) {
  auto p = make_param({1, 2});
  Sgd opt({p}, {});
  set_grad(p.tensor, {1, 1});
  opt.zero_grad();
  EXPECT_EQ(p.tensor.grad_vector(), (std::vector<double>{0, 0}));
}

TEST(MilestoneSchedule, StepDecay) {
  MilestoneSchedule s(0.1, {3, 6}, 0.1);
  EXPECT_DOUBLE_EQ(s.lr(0), 0.1);
  EXPECT_DOUBLE_EQ(s.lr(2), 0.1);
  EXPECT_NEAR(s.lr(3), 0.01, 1e-15);
  EXPECT_NEAR(s.lr(5), 0.01, 1e-15);
  EXPECT_NEAR(s.lr(6), 0.001, 1e-15);
  EXPECT_NEAR(s.lr(100), 0.001, 1e-15);
}

TEST(MilestoneSchedule, RejectsUnsortedOrBadFactor) {
  EXPECT_THROW(MilestoneSchedule(0.1, {5, 3}, 0.1), ConfigError);
  EXPECT_THROW(MilestoneSchedule(0.1, {3}, 0.0), ConfigError);
  EXPECT_THROW(MilestoneSchedule(-0.1, {3}, 0.1), ConfigError);
}

TEST(MilestoneSchedule, DefaultMilestones) {
  EXPECT_EQ(default_milestones(10), (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(default_milestones(600), (std::vector<std::size_t>{240, 480}));
  EXPECT_EQ(default_milestones(1), (std::vector<std::size_t>{}));
}
