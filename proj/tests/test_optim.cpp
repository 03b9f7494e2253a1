#include <gtest/gtest.h>

#include <cmath>

#include "funkflow/optim.hpp"

using namespace funkflow;

static ParamStore one(double v) {
  ParamStore p;
  p.add("x", {1}).data[0] = v;
  return p;
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  auto p = one(1.0);
  optim::OptimizerState s(p, {0.9, 0.999, 1e-8, 0.0});
  optim::adamw_step(s, p, one(3.0), 0.1);
  // Bias-corrected first step is sign(g) * lr up to eps.
  EXPECT_NEAR(p.at("x").data[0], 0.9, 1e-8);
}

TEST(AdamW, DecoupledDecayWithZeroGradient) {
  auto p = one(2.0);
  optim::OptimizerState s(p, {0.9, 0.999, 1e-8, 0.5});
  optim::adamw_step(s, p, one(0.0), 0.1);
  EXPECT_DOUBLE_EQ(p.at("x").data[0], 2.0 * (1.0 - 0.05));
}

TEST(AdamW, ZeroLearningRateLeavesParamsBitwise) {
  auto p = one(1.2345);
  const auto before = p;
  optim::OptimizerState s(p, {});
  for (int i = 0; i < 5; ++i) optim::adamw_step(s, p, one(0.7), 0.0);
  EXPECT_EQ(p, before);
}

TEST(AdamW, MinimizesQuadratic) {
  auto p = one(5.0);
  optim::OptimizerState s(p, {0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 2000; ++i) optim::adamw_step(s, p, one(2.0 * p.at("x").data[0]), 0.05);
  EXPECT_NEAR(p.at("x").data[0], 0.0, 1e-3);
}

TEST(Clip, RescalesToMaxNorm) {
  ParamStore g;
  g.add("a", {2}).data = {3.0, 4.0};
  EXPECT_DOUBLE_EQ(optim::clip_global_norm(g, 0.5), 5.0);
  EXPECT_NEAR(optim::global_norm(g), 0.5, 1e-15);
  EXPECT_NEAR(g.at("a").data[0], 0.3, 1e-15);
  ParamStore small;
  small.add("a", {1}).data = {0.1};
  optim::clip_global_norm(small, 0.5);
  EXPECT_EQ(small.at("a").data[0], 0.1);
}

TEST(Schedule, LinearWarmupThenConstant) {
  EXPECT_DOUBLE_EQ(optim::lr_schedule(0, 1e-5, 5), 2e-6);
  EXPECT_DOUBLE_EQ(optim::lr_schedule(4, 1e-5, 5), 1e-5);
  EXPECT_DOUBLE_EQ(optim::lr_schedule(100, 1e-5, 5), 1e-5);
  EXPECT_DOUBLE_EQ(optim::lr_schedule(0, 1e-3, 0), 1e-3);
}
