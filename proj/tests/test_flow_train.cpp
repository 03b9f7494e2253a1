#include <gtest/gtest.h>

#include <cmath>

#include "funkflow/flow_train.hpp"
#include "stats.hpp"

using namespace funkflow;
using namespace funkflow::flow;

namespace {

ModelConfig tiny() {
  auto c = ModelConfig::gradcheck();
  c.kernel = {1.0, 0.1};
  return c;
}

std::vector<pk::Study> corpus(std::size_t n, std::uint64_t seed) {
  std::vector<pk::Study> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(pk::simulate_study({}, derive_seed(seed, {i})));
  return out;
}

}  // namespace

TEST(Example, PriorBranchAndPastSlots) {
  const auto st = pk::simulate_study({}, 1);
  const auto cfg = tiny();
  Rng a(5), b(5);
  const auto ex = make_example_with_split(without_subject(st, 0), st.individuals[0], 0, cfg, a);
  const auto expected = gp::reference_sample(std::nullopt, ex.target.times, cfg.kernel, cfg.jitter, b);
  EXPECT_EQ(ex.z0, expected);

  Rng c(6);
  const auto ex3 = make_example_with_split(without_subject(st, 0), st.individuals[0], 3, cfg, c);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(ex3.z0[j], ex3.z1[j]);
  for (std::size_t j = 3; j < ex3.z0.size(); ++j) EXPECT_GT(ex3.z0[j], 0.0);
  EXPECT_EQ(ex3.prefix_len(), 3u);
}

TEST(Example, TargetExcludedFromContext) {
  const auto st = pk::simulate_study({}, 2);
  Rng rng(1);
  const auto ex = make_training_example(st, 1, tiny(), rng);
  std::size_t n = 0;
  for (std::size_t i = 0; i < st.individuals.size(); ++i)
    if (i != 1) n += st.individuals[i].times.size();
  EXPECT_EQ(ex.context.size(), n);
}

TEST(Example, SplitHistogramUniform) {
  auto st = pk::simulate_study({}, 3);
  const std::size_t T = st.individuals[0].times.size();
  Rng rng(7);
  std::vector<std::size_t> counts(T, 0);
  for (int i = 0; i < 10000; ++i) ++counts[make_training_example(st, 0, tiny(), rng).prefix_len()];
  EXPECT_LT(chi_square_uniform(counts), chi_square_critical_999(T - 1));
}

TEST(Example, EmptyTargetRejected) {
  const auto st = pk::simulate_study({}, 4);
  pk::IndividualRecord empty{"e", {1.0, pk::Route::Oral}, {}, {}};
  Rng rng(1);
  EXPECT_THROW(make_example_with_split(st, empty, 0, tiny(), rng), ValidationError);
}

TEST(Path, EndpointsWithoutNoise) {
  Rng rng(1);
  const std::vector<double> z0{0.1, 0.5, 0.9}, z1{0.1, 1.5, -0.2}, mask{0, 1, 1};
  EXPECT_EQ(conditional_path_sample(z0, z1, 1.0, 0.0, mask, rng), z1);
  EXPECT_EQ(conditional_path_sample(z0, z1, 0.0, 0.0, mask, rng), z0);
}

TEST(Path, PastSlotsExactAndNoiseSd) {
  Rng rng(2);
  const std::vector<double> z0{0.4, 0.5}, z1{0.4, 1.5}, mask{0, 1};
  std::vector<double> resid;
  for (int i = 0; i < 100000; ++i) {
    const auto zt = conditional_path_sample(z0, z1, 0.3, 1e-4, mask, rng);
    ASSERT_EQ(zt[0], 0.4);
    resid.push_back(zt[1] - (0.3 * 1.5 + 0.7 * 0.5));
  }
  EXPECT_NEAR(std::sqrt(moments(resid).var), 1e-4, 3e-6);
}

TEST(Loss, PerfectZeroAndDirectArithmetic) {
  const std::vector<double> z0{1, 0.5, 0.25}, z1{1, 1.5, 0.75}, mask{0, 1, 1};
  EXPECT_EQ(cfm_loss({0, 1.0, 0.5}, z0, z1, mask).loss, 0.0);
  EXPECT_DOUBLE_EQ(cfm_loss({0, 0, 0}, z0, z1, mask).loss, (1.0 + 0.25) / 2.0);
  const auto all_past = cfm_loss({3, 3, 3}, z0, z1, {0, 0, 0});
  EXPECT_EQ(all_past.loss, 0.0);
  EXPECT_EQ(all_past.future_count, 0u);
}

TEST(Loss, IgnoresPastPredictionsAndIsNonnegative) {
  Rng rng(3);
  const std::vector<double> z0{1, 0.5, 0.25, 1.0}, z1{1, 2.0, 0.75, 0.5}, mask{0, 0, 1, 1};
  for (int i = 0; i < 100; ++i) {
    std::vector<double> v{rng.normal(), rng.normal(), 0.5, -0.5};
    const auto l = cfm_loss(v, z0, z1, mask);
    EXPECT_EQ(l.loss, 0.0);
    v[2] += rng.normal();
    EXPECT_GT(cfm_loss(v, z0, z1, mask).loss, 0.0);
  }
}

TEST(LossAndGrad, NullHeadBiasGradient) {
  const auto st = pk::simulate_study({}, 5);
  auto cfg = tiny();
  cfg.sigma_min = 0.0;
  Rng rng(4);
  FlowModel m(cfg, rng);
  m.zero_head();
  std::vector<FlowExample> batch{make_example_with_split(without_subject(st, 0), st.individuals[0], 2, cfg, rng)};
  const auto lg = loss_and_grad(m, batch, {{0.5, 1}}, false);
  const auto& ex = batch[0];
  const auto mask = ex.target.prefix_mask();
  double n = 0, sum_u = 0, sum_u2 = 0;
  for (std::size_t j = 0; j < mask.size(); ++j)
    if (mask[j] != 0.0) {
      const double u = ex.z1[j] - ex.z0[j];
      n += 1;
      sum_u += u;
      sum_u2 += u * u;
    }
  EXPECT_NEAR(lg.loss, sum_u2 / n, 1e-14);
  const auto last = m.head().layer(m.head().layer_count() - 1);
  EXPECT_NEAR(lg.grads.at(last.b()).data[0], -2.0 * sum_u / n, 1e-12);
}

TEST(LossAndGrad, ZeroGradientAtMinimum) {
  const auto st = pk::simulate_study({}, 6);
  auto cfg = tiny();
  cfg.sigma_min = 0.0;
  Rng rng(5);
  FlowModel m(cfg, rng);
  m.zero_head();
  auto ex = make_example_with_split(without_subject(st, 0), st.individuals[0], 1, cfg, rng);
  ex.z1 = ex.z0;
  const auto lg = loss_and_grad(m, {ex}, {{0.3, 2}}, false);
  EXPECT_EQ(lg.loss, 0.0);
  for (const auto& [_, t] : lg.grads)
    for (double g : t.data) EXPECT_LE(std::abs(g), 1e-10);
}

TEST(Train, ZeroLearningRateFreezesParameters) {
  Rng rng(6);
  FlowModel m(tiny(), rng);
  const auto before = m.params();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.base_lr = 0.0;
  train(m, corpus(8, 1), tc);
  EXPECT_EQ(m.params(), before);
}

TEST(Train, IdenticalSeedsIdenticalHistories) {
  const auto data = corpus(12, 2);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.base_lr = 1e-3;
  tc.seed = 11;
  auto run = [&] {
    Rng rng(7);
    FlowModel m(tiny(), rng);
    const auto r = train(m, data, tc);
    return std::make_pair(r.history, m.params());
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.first.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.first[e].mean_loss, b.first[e].mean_loss);
    EXPECT_EQ(a.first[e].lr, b.first[e].lr);
  }
  EXPECT_EQ(a.second, b.second);
}

TEST(Train, CheckpointCadenceAndBest) {
  Rng rng(8);
  FlowModel m(tiny(), rng);
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 8;
  tc.base_lr = 1e-3;
  tc.checkpoint_every = 2;
  std::vector<std::pair<long, bool>> events;
  const auto r = train(m, corpus(8, 3), tc, [&](const FlowModel&, long e, bool best) { events.emplace_back(e, best); });
  std::size_t periodic = 0;
  for (auto [e, best] : events)
    if (!best) {
      EXPECT_EQ(e % 2, 0);
      ++periodic;
    }
  EXPECT_EQ(periodic, 2u);
  double best = r.history.front().mean_loss;
  for (const auto& h : r.history) best = std::min(best, h.mean_loss);
  EXPECT_EQ(r.best_loss, best);
}

TEST(Train, NonFiniteLossAbortsAndRestoresLastGood) {
  Rng rng(9);
  FlowModel m(tiny(), rng);
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 8;
  tc.base_lr = 1e200;
  tc.warmup_epochs = 0;
  tc.weight_decay = 0.0;
  ParamStore at_checkpoint;
  long last_epoch = 0;
  try {
    train(m, corpus(8, 4), tc, [&](const FlowModel& mm, long e, bool) {
      at_checkpoint = mm.params();
      last_epoch = e;
    });
    FAIL() << "expected a non-finite loss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_NE(std::string(e.what()).size(), 0u);
  }
  for (const auto& [_, t] : m.params())
    for (double v : t.data) EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(last_epoch, 1);
  EXPECT_EQ(m.params(), at_checkpoint);
}

TEST(Train, RejectsEmptyCorpus) {
  Rng rng(10);
  FlowModel m(tiny(), rng);
  EXPECT_THROW(train(m, {}, TrainConfig{}), ValidationError);
}
