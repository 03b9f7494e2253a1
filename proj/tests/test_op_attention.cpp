#include <gtest/gtest.h>

#include <cmath>

#include "funkflow/op_attention.hpp"

using namespace funkflow;
using namespace funkflow::attn;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

Mat softmax_attention(const Mat& Q, const Mat& K, const Mat& V) {
  Mat S = Q * K.transpose() / std::sqrt(double(Q.cols()));
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    S.row(i).array() -= S.row(i).maxCoeff();
    S.row(i) = S.row(i).array().exp();
    S.row(i) /= S.row(i).sum();
  }
  return S * V;
}

std::vector<double> uniform_grid(std::size_t M) {
  std::vector<double> t(M);
  for (std::size_t k = 0; k < M; ++k) t[k] = double(k) / double(M - 1);
  return t;
}

double max_rel_dev(const Mat& a, const Mat& b) {
  return ((a - b).array().abs() / b.array().abs()).maxCoeff();
}

}  // namespace

TEST(Quadrature, ThreePointExample) {
  const auto q = trapezoid_weights({0, 1, 2});
  EXPECT_DOUBLE_EQ(q.weight[0], 0.25);
  EXPECT_DOUBLE_EQ(q.weight[1], 0.5);
  EXPECT_DOUBLE_EQ(q.weight[2], 0.25);
}

TEST(Quadrature, UniformGridStructure) {
  const auto q = trapezoid_weights(uniform_grid(10));
  for (std::size_t k = 1; k + 1 < 10; ++k) EXPECT_NEAR(q.weight[k], q.weight[1], 1e-15);
  EXPECT_NEAR(q.weight[0], 0.5 * q.weight[1], 1e-15);
  EXPECT_NEAR(q.weight[9], 0.5 * q.weight[1], 1e-15);
}

TEST(Quadrature, SingleValidPoint) {
  const auto q = trapezoid_weights({0.3, 0.5, 0.9}, {0, 1, 0});
  EXPECT_EQ(q.weight, (std::vector<double>{0, 1, 0}));
  EXPECT_THROW(trapezoid_weights({0.3}, {0}), ValidationError);
}

TEST(Quadrature, FuzzedGridsNonnegativeUnitSumZeroPadding) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t M = std::size_t(rng.uniform_int(1, 20));
    std::vector<double> t;
    std::vector<char> v;
    double x = rng.uniform();
    bool any = false;
    for (std::size_t k = 0; k < M; ++k) {
      t.push_back(x += rng.uniform(0.0, 0.3));
      v.push_back(rng.bernoulli(0.7));
      any = any || v.back();
    }
    if (!any) v[0] = 1;
    const auto q = trapezoid_weights(t, v);
    double total = 0.0;
    for (std::size_t k = 0; k < M; ++k) {
      EXPECT_GE(q.weight[k], 0.0);
      if (!v[k]) EXPECT_EQ(q.weight[k], 0.0);
      total += q.weight[k];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Quadrature, GroupedHasNoCrossSubjectIncrements) {
  const auto q = grouped_trapezoid_weights({0.1, 0.5, 0.9, 0.2, 0.4}, {0, 0, 0, 1, 1});
  EXPECT_EQ(q.prev[3], -1);
  EXPECT_EQ(q.prev[4], 3);
  double a = 0, b = 0;
  for (int k = 0; k < 3; ++k) a += q.weight[std::size_t(k)];
  for (int k = 3; k < 5; ++k) b += q.weight[std::size_t(k)];
  EXPECT_NEAR(a, 0.5, 1e-15);
  EXPECT_NEAR(b, 0.5, 1e-15);
}

TEST(Mask, BlockDiagonalStructure) {
  const auto m = block_diagonal_mask({0, 0, 0, 1, 1});
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_EQ(m.additive(i, j) == 0.0, (i < 3) == (j < 3));
  const auto one = block_diagonal_mask({4, 4, 4}, {1, 1, 0});
  EXPECT_EQ(one.additive(0, 1), 0.0);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(one.additive(2, k), kMasked);
    EXPECT_EQ(one.additive(k, 2), kMasked);
  }
}

TEST(OperatorAttention, SingleKeyFallsBackToValue) {
  Rng rng(2);
  const Mat Q = random_mat(4, 3, rng), K = random_mat(1, 3, rng), V = random_mat(1, 5, rng);
  const Mat out = operator_attention(Q, K, V, {}, trapezoid_weights({0.7}));
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_LE((out.row(i) - V.row(0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(OperatorAttention, IdenticalKeysAndValuesReturnValue) {
  Rng rng(3);
  const Mat Q = random_mat(3, 4, rng);
  const Mat K = random_mat(1, 4, rng).replicate(6, 1), V = random_mat(1, 2, rng).replicate(6, 1);
  const Mat out = operator_attention(Q, K, V, {}, trapezoid_weights({0, 0.1, 0.15, 0.5, 0.8, 1.0}));
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_LE((out.row(i) - V.row(0)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(OperatorAttention, ConvergesToSoftmaxOnUniformGrids) {
  Rng rng(4);
  double prev = 1e9;
  for (std::size_t M : {16u, 64u, 256u}) {
    const Mat Q = random_mat(8, 8, rng), K = random_mat(Eigen::Index(M), 8, rng), V = random_mat(Eigen::Index(M), 4, rng, 0, 1);
    const double dev = max_rel_dev(operator_attention(Q, K, V, {}, trapezoid_weights(uniform_grid(M))),
                                   softmax_attention(Q, K, V));
    if (M == 64) EXPECT_LE(dev, 0.05);
    EXPECT_LT(dev, prev);
    prev = dev;
  }
}

TEST(OperatorAttention, InvariantToRowwiseScoreShift) {
  Rng rng(5);
  const Mat Q = random_mat(3, 4, rng), K = random_mat(7, 4, rng), V = random_mat(7, 3, rng);
  const auto qw = trapezoid_weights({0, 0.05, 0.3, 0.31, 0.6, 0.9, 1.0});
  AttentionMask shift;
  shift.additive = Mat(3, 7);
  for (Eigen::Index i = 0; i < 3; ++i) shift.additive.row(i).setConstant(double(i + 1) * 37.5);
  const Mat a = operator_attention(Q, K, V, {}, qw), b = operator_attention(Q, K, V, shift, qw);
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(OperatorAttention, FullyMaskedRowRejected) {
  Rng rng(6);
  const Mat Q = random_mat(2, 2, rng), K = random_mat(2, 2, rng), V = random_mat(2, 2, rng);
  AttentionMask m;
  m.additive = Mat::Zero(2, 2);
  m.additive.row(1).setConstant(kMasked);
  EXPECT_THROW(operator_attention(Q, K, V, m, trapezoid_weights({0, 1})), ValidationError);
  const Mat out = operator_attention(Q, K, V, m, trapezoid_weights({0, 1}), nullptr, true);
  EXPECT_EQ(out.row(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(OperatorAttention, GradientMatchesFiniteDifferencesOnThreeKeys) {
  Rng rng(7);
  Mat Q = random_mat(2, 3, rng), K = random_mat(3, 3, rng), V = random_mat(3, 2, rng);
  const Mat probe = random_mat(2, 2, rng);
  const auto qw = trapezoid_weights({0.0, 0.3, 1.0});
  OpAttnCache c;
  operator_attention(Q, K, V, {}, qw, &c);
  const auto g = operator_attention_backward(Q, K, V, qw, c, probe);
  auto f = [&] { return operator_attention(Q, K, V, {}, qw).cwiseProduct(probe).sum(); };
  auto check = [&](Mat& X, const Mat& dX) {
    for (Eigen::Index k = 0; k < X.size(); ++k) {
      const double orig = X.data()[k], h = 1e-6;
      X.data()[k] = orig + h;
      const double up = f();
      X.data()[k] = orig - h;
      const double dn = f();
      X.data()[k] = orig;
      const double fd = (up - dn) / (2 * h), an = dX.data()[k];
      EXPECT_LE(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}), 1e-5);
    }
  };
  check(Q, g.dQ);
  check(K, g.dK);
  check(V, g.dV);
}

TEST(MultiHead, ShapeAndSubjectIsolation) {
  Rng rng(8);
  ParamStore p;
  MultiHeadOpAttn a{"a", 6, 2};
  a.init(p, rng);
  const std::vector<long> subj{0, 0, 0, 1, 1, 2, 2, 2};
  const std::vector<double> t{0.1, 0.4, 0.9, 0.2, 0.3, 0.0, 0.5, 1.0};
  const auto qw = grouped_trapezoid_weights(t, subj);
  const auto mask = block_diagonal_mask(subj);
  Mat x = random_mat(8, 6, rng);
  MultiHeadOpAttn::Cache c;
  const Mat y0 = self_op_attn(a, p, x, mask, qw, c);
  EXPECT_EQ(y0.rows(), 8);
  EXPECT_EQ(y0.cols(), 6);
  x.middleRows(3, 2) += random_mat(2, 6, rng);
  const Mat y1 = self_op_attn(a, p, x, mask, qw, c);
  EXPECT_EQ(y0.topRows(3), y1.topRows(3));
  EXPECT_EQ(y0.bottomRows(3), y1.bottomRows(3));
  EXPECT_NE(y0.middleRows(3, 2), y1.middleRows(3, 2));
}

TEST(MultiHead, IdentityProjectionsReduceToOperatorAttention) {
  ParamStore p;
  Rng rng(9);
  MultiHeadOpAttn a{"a", 4, 1};
  a.init(p, rng);
  for (const char* w : {"q", "k", "v", "o"}) {
    p.at(std::string("a.") + w + ".w").mat() = Mat::Identity(4, 4);
    p.at(std::string("a.") + w + ".b").mat().setZero();
  }
  const Mat x = random_mat(5, 4, rng);
  const auto qw = trapezoid_weights({0, 0.2, 0.3, 0.7, 1.0});
  MultiHeadOpAttn::Cache c;
  const Mat y = self_op_attn(a, p, x, {}, qw, c);
  EXPECT_LE((y - operator_attention(x, x, x, {}, qw)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(MultiHead, CrossAttentionSingleKeyAndMaskedSubject) {
  ParamStore p;
  Rng rng(10);
  MultiHeadOpAttn a{"a", 4, 2};
  a.init(p, rng);
  const Mat x = random_mat(3, 4, rng);
  MultiHeadOpAttn::Cache c;
  const Mat y1 = random_mat(1, 4, rng);
  const Mat out = cross_op_attn(a, p, x, y1, {}, trapezoid_weights({0.5}), c);
  EXPECT_EQ(out.rows(), 3);
  for (Eigen::Index i = 1; i < 3; ++i) EXPECT_LE((out.row(i) - out.row(0)).cwiseAbs().maxCoeff(), 1e-14);

  const std::vector<long> subj{0, 0, 1, 1};
  const std::vector<char> valid{1, 1, 0, 0};
  const auto qw = grouped_trapezoid_weights({0.1, 0.6, 0.2, 0.9}, subj, valid);
  const auto mask = padding_mask({1, 1, 1}, valid);
  Mat y = random_mat(4, 4, rng);
  const Mat before = cross_op_attn(a, p, x, y, mask, qw, c);
  y.bottomRows(2) = random_mat(2, 4, rng);
  EXPECT_EQ(before, cross_op_attn(a, p, x, y, mask, qw, c));
}

TEST(MultiHead, GradientMatchesFiniteDifferences) {
  ParamStore p;
  Rng rng(11);
  MultiHeadOpAttn a{"a", 4, 2};
  a.init(p, rng);
  Mat xq = random_mat(3, 4, rng), xkv = random_mat(5, 4, rng);
  const Mat probe = random_mat(3, 4, rng);
  const auto qw = trapezoid_weights({0, 0.1, 0.4, 0.45, 1.0});
  MultiHeadOpAttn::Cache c;
  a.forward(p, xq, xkv, {}, qw, c);
  ParamStore g = p.zeros_like();
  const auto [dxq, dxkv] = a.backward(p, g, qw, c, probe);
  auto f = [&] {
    MultiHeadOpAttn::Cache cc;
    return a.forward(p, xq, xkv, {}, qw, cc).cwiseProduct(probe).sum();
  };
  const double h = 1e-5;
  auto rel = [](double fd, double an) { return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-5}); };
  for (auto& [name, t] : p)
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double o = t.data[k];
      t.data[k] = o + h;
      const double up = f();
      t.data[k] = o - h;
      const double dn = f();
      t.data[k] = o;
      EXPECT_LE(rel((up - dn) / (2 * h), g.at(name).data[k]), 1e-5) << name << k;
    }
  for (const auto& pr : {std::pair<Mat*, const Mat*>{&xq, &dxq}, std::pair<Mat*, const Mat*>{&xkv, &dxkv}}) {
    Mat& X = *pr.first;
    for (Eigen::Index k = 0; k < X.size(); ++k) {
      const double o = X.data()[k];
      X.data()[k] = o + h;
      const double up = f();
      X.data()[k] = o - h;
      const double dn = f();
      X.data()[k] = o;
      EXPECT_LE(rel((up - dn) / (2 * h), pr.second->data()[k]), 1e-5);
    }
  }
}
