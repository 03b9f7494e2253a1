#include <gtest/gtest.h>

#include <cmath>

#include "funkflow/nn.hpp"

using namespace funkflow;
using namespace funkflow::nn;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Central-difference check of d(sum(W .* f(x)))/dparams and /dx.
template <class Fwd, class Bwd>
void check_grads(ParamStore& p, Mat x, const Mat& probe, Fwd fwd, Bwd bwd, double tol) {
  ParamStore g = p.zeros_like();
  const Mat dx = bwd(g, x, probe);
  const double h = 1e-6;
  auto objective = [&] { return fwd(x).cwiseProduct(probe).sum(); };
  for (auto& [name, t] : p) {
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double orig = t.data[k];
      t.data[k] = orig + h;
      const double up = objective();
      t.data[k] = orig - h;
      const double dn = objective();
      t.data[k] = orig;
      const double fd = (up - dn) / (2 * h);
      const double an = g.at(name).data[k];
      EXPECT_LE(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}), tol) << name << "[" << k << "]";
    }
  }
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double orig = x.data()[k];
    x.data()[k] = orig + h;
    const double up = objective();
    x.data()[k] = orig - h;
    const double dn = objective();
    x.data()[k] = orig;
    const double fd = (up - dn) / (2 * h);
    EXPECT_LE(std::abs(fd - dx.data()[k]) / std::max({std::abs(fd), std::abs(dx.data()[k]), 1e-6}), tol);
  }
}

}  // namespace

TEST(Linear, ForwardIsAffine) {
  ParamStore p;
  Rng rng(1);
  Linear lin{"l", 3, 2};
  lin.init(p, rng);
  p.at("l.b").data = {1.0, -1.0};
  Mat x = Mat::Zero(1, 3);
  const Mat y = lin.forward(p, x);
  EXPECT_EQ(y(0, 0), 1.0);
  EXPECT_EQ(y(0, 1), -1.0);
  EXPECT_THROW(lin.forward(p, Mat::Zero(1, 4)), ValidationError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  ParamStore p;
  Rng rng(2);
  Linear lin{"l", 4, 3};
  lin.init(p, rng);
  const Mat x = random_mat(5, 4, rng), probe = random_mat(5, 3, rng);
  check_grads(
      p, x, probe, [&](const Mat& in) { return lin.forward(p, in); },
      [&](ParamStore& g, const Mat& in, const Mat& dy) { return lin.backward(p, g, in, dy); }, 1e-7);
}

TEST(Gelu, KnownValuesAndDerivative) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-15);
  EXPECT_NEAR(gelu(-1.0), -0.15865525393145707, 1e-15);
  for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    const double fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
    EXPECT_NEAR(gelu_grad(x), fd, 1e-8);
  }
}

TEST(LayerNorm, NormalizesRows) {
  ParamStore p;
  LayerNorm ln{"ln", 6};
  ln.init(p);
  Rng rng(3);
  const Mat x = random_mat(4, 6, rng) * 10.0;
  LayerNorm::Cache c;
  const Mat y = ln.forward(p, x, c);
  for (Eigen::Index i = 0; i < 4; ++i) {
    EXPECT_NEAR(y.row(i).mean(), 0.0, 1e-12);
    EXPECT_NEAR((y.row(i).array().square()).mean(), 1.0, 1e-5);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  ParamStore p;
  LayerNorm ln{"ln", 5};
  ln.init(p);
  Rng rng(4);
  for (auto& v : p.at("ln.gain").data) v = rng.normal(1.0, 0.3);
  for (auto& v : p.at("ln.shift").data) v = rng.normal();
  const Mat x = random_mat(3, 5, rng), probe = random_mat(3, 5, rng);
  LayerNorm::Cache c;
  check_grads(
      p, x, probe, [&](const Mat& in) { return ln.forward(p, in, c); },
      [&](ParamStore& g, const Mat& in, const Mat& dy) {
        ln.forward(p, in, c);
        return ln.backward(p, g, c, dy);
      },
      1e-6);
}

TEST(Mlp, GradientMatchesFiniteDifferences) {
  ParamStore p;
  Rng rng(5);
  Mlp mlp{"m", {3, 6, 6, 2}};
  mlp.init(p, rng);
  const Mat x = random_mat(4, 3, rng), probe = random_mat(4, 2, rng);
  Mlp::Cache c;
  check_grads(
      p, x, probe, [&](const Mat& in) { return mlp.forward(p, in, c); },
      [&](ParamStore& g, const Mat& in, const Mat& dy) {
        mlp.forward(p, in, c);
        return mlp.backward(p, g, c, dy);
      },
      1e-6);
}

TEST(Dropout, InvertedScalingAndIdentityWithoutRng) {
  Dropout d;
  const Mat x = Mat::Ones(200, 50);
  EXPECT_EQ(d.forward(x, 0.5, nullptr), x);
  Rng rng(6);
  const Mat y = d.forward(x, 0.25, &rng);
  EXPECT_NEAR(y.mean(), 1.0, 0.02);
  for (Eigen::Index i = 0; i < y.size(); ++i) EXPECT_TRUE(y.data()[i] == 0.0 || std::abs(y.data()[i] - 4.0 / 3.0) < 1e-15);
  const Mat g = d.backward(Mat::Ones(200, 50));
  EXPECT_EQ(g, y);
}

TEST(FourierTimeEmbed, LayoutAndFrequencies) {
  const auto e = fourier_time_embed(0.0, 8, 256.0);
  ASSERT_EQ(e.size(), 8);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(e(k), 0.0);
    EXPECT_EQ(e(4 + k), 1.0);
  }
  const double t = 0.3;
  const auto f = fourier_time_embed(t, 8, 256.0);
  // Frequencies 256^{-k/3}: 1, 1/6.35, 1/40.3, 1/256.
  for (int k = 0; k < 4; ++k) {
    const double w = std::pow(256.0, -k / 3.0);
    EXPECT_NEAR(f(k), std::sin(t * w), 1e-15);
    EXPECT_NEAR(f(4 + k), std::cos(t * w), 1e-15);
  }
  EXPECT_THROW(fourier_time_embed(0.1, 7, 256.0), ValidationError);
  EXPECT_THROW(fourier_time_embed(0.1, 2, 256.0), ValidationError);
}
