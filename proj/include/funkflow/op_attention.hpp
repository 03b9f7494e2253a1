#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "funkflow/errors.hpp"
#include "funkflow/nn.hpp"
#include "funkflow/tensor.hpp"

namespace funkflow::attn {

inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

// Trapezoidal quadrature over one or more concatenated time grids.
// `weight` is normalized to unit sum over valid positions; `increment` is the
// time step to the previous valid position of the same grid, scaled by the
// same constant, so numerator and denominator of the attention ratio stay
// consistent. `prev` is that previous position (-1 at grid starts/padding).
struct QuadratureWeights {
  std::vector<double> weight;
  std::vector<double> increment;
  std::vector<long> prev;
  std::vector<char> valid;

  std::size_t size() const { return weight.size(); }
};

// Single grid. Padded positions (pad_mask[k] == 0) get weight 0.
inline QuadratureWeights trapezoid_weights(const std::vector<double>& times, const std::vector<char>& valid_mask = {}) {
  const std::size_t M = times.size();
  QuadratureWeights q;
  q.weight.assign(M, 0.0);
  q.increment.assign(M, 0.0);
  q.prev.assign(M, -1);
  q.valid = valid_mask.empty() ? std::vector<char>(M, 1) : valid_mask;
  if (q.valid.size() != M) throw ValidationError("quadrature mask length mismatch");

  long last = -1;
  std::size_t n_valid = 0;
  for (std::size_t k = 0; k < M; ++k) {
    if (!q.valid[k]) continue;
    ++n_valid;
    if (last >= 0) {
      const double dt = times[k] - times[std::size_t(last)];
      if (dt < 0.0) throw ValidationError("quadrature times must be sorted ascending");
      q.increment[k] = dt;
      q.prev[k] = last;
    }
    last = long(k);
  }
  if (n_valid == 0) throw ValidationError("quadrature needs at least one valid position");

  // w_k = (dt_k + dt_{k+1}) / 2 with zero increments at both ends.
  for (std::size_t k = 0; k < M; ++k) {
    if (!q.valid[k]) continue;
    q.weight[k] += 0.5 * q.increment[k];
    if (q.prev[k] >= 0) q.weight[std::size_t(q.prev[k])] += 0.5 * q.increment[k];
  }
  double total = 0.0;
  for (double w : q.weight) total += w;
  if (total <= 0.0) {
    // Degenerate grid (single point or coincident times): unit weight on the
    // first valid position, no increments.
    for (std::size_t k = 0; k < M; ++k) {
      q.increment[k] = 0.0;
      q.prev[k] = -1;
    }
    for (std::size_t k = 0; k < M; ++k)
      if (q.valid[k]) {
        q.weight[k] = 1.0;
        break;
      }
    return q;
  }
  for (std::size_t k = 0; k < M; ++k) {
    q.weight[k] /= total;
    q.increment[k] /= total;
  }
  return q;
}

// Several grids laid end to end (positions grouped by `group`, contiguous).
// Each grid is integrated separately and the groups share mass equally, so
// no increment ever spans two subjects.
inline QuadratureWeights grouped_trapezoid_weights(const std::vector<double>& times, const std::vector<long>& group,
                                                   const std::vector<char>& valid_mask = {}) {
  const std::size_t M = times.size();
  if (group.size() != M) throw ValidationError("quadrature group length mismatch");
  const std::vector<char> valid = valid_mask.empty() ? std::vector<char>(M, 1) : valid_mask;
  QuadratureWeights out;
  std::size_t n_groups = 0;
  std::size_t start = 0;
  while (start < M) {
    std::size_t end = start;
    while (end < M && group[end] == group[start]) ++end;
    std::vector<double> t(times.begin() + long(start), times.begin() + long(end));
    std::vector<char> v(valid.begin() + long(start), valid.begin() + long(end));
    bool any = false;
    for (char c : v) any = any || c;
    QuadratureWeights g;
    if (any) {
      g = trapezoid_weights(t, v);
      ++n_groups;
    } else {
      g.weight.assign(t.size(), 0.0);
      g.increment.assign(t.size(), 0.0);
      g.prev.assign(t.size(), -1);
      g.valid = v;
    }
    for (std::size_t k = 0; k < t.size(); ++k) {
      out.weight.push_back(g.weight[k]);
      out.increment.push_back(g.increment[k]);
      out.prev.push_back(g.prev[k] >= 0 ? g.prev[k] + long(start) : -1);
      out.valid.push_back(g.valid[k]);
    }
    start = end;
  }
  if (n_groups == 0) throw ValidationError("quadrature needs at least one valid position");
  for (std::size_t k = 0; k < M; ++k) {
    out.weight[k] /= double(n_groups);
    out.increment[k] /= double(n_groups);
  }
  return out;
}

// Additive score mask, 0 (attend) or -inf (blocked). An empty matrix means
// no masking beyond key validity.
struct AttentionMask {
  Mat additive;
  bool empty() const { return additive.size() == 0; }
};

// Unmasked iff same subject and both positions valid.
inline AttentionMask block_diagonal_mask(const std::vector<long>& subject, const std::vector<char>& valid = {}) {
  const std::size_t n = subject.size();
  AttentionMask m;
  m.additive = Mat::Constant(Eigen::Index(n), Eigen::Index(n), kMasked);
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid.empty() && !valid[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (!valid.empty() && !valid[j]) continue;
      if (subject[i] == subject[j]) m.additive(Eigen::Index(i), Eigen::Index(j)) = 0.0;
    }
  }
  return m;
}

// Queries attend to every valid key.
inline AttentionMask padding_mask(const std::vector<char>& query_valid, const std::vector<char>& key_valid) {
  AttentionMask m;
  m.additive = Mat::Constant(Eigen::Index(query_valid.size()), Eigen::Index(key_valid.size()), kMasked);
  for (std::size_t i = 0; i < query_valid.size(); ++i)
    for (std::size_t j = 0; j < key_valid.size(); ++j)
      if (query_valid[i] && key_valid[j]) m.additive(Eigen::Index(i), Eigen::Index(j)) = 0.0;
  return m;
}

struct OpAttnCache {
  Mat E;                  // exp(S - rowmax), 0 where masked
  Eigen::VectorXd denom;  // per query
  std::vector<char> fallback;
  std::vector<char> empty_row;
  Mat out;
  double scale = 1.0;
};

// out_i = sum_k e^{S_ik} w_k V_k / (1/2 sum_k (e^{S_ik} + e^{S_i,prev(k)}) dt_k)
// with S = Q K^T / sqrt(d_A) + mask. Rows whose denominator vanishes (a
// single reachable key) fall back to the w-weighted average.
inline Mat operator_attention(const Mat& Q, const Mat& K, const Mat& V, const AttentionMask& mask,
                              const QuadratureWeights& qw, OpAttnCache* cache = nullptr,
                              bool zero_masked_rows = false) {
  const Eigen::Index nq = Q.rows(), M = K.rows();
  if (Q.cols() != K.cols() || V.rows() != M || Eigen::Index(qw.size()) != M)
    throw ValidationError("operator attention: shape mismatch");
  if (!mask.empty() && (mask.additive.rows() != nq || mask.additive.cols() != M))
    throw ValidationError("operator attention: mask shape mismatch");

  OpAttnCache local;
  OpAttnCache& c = cache ? *cache : local;
  c.scale = 1.0 / std::sqrt(double(Q.cols()));
  Mat S = (Q * K.transpose()) * c.scale;
  if (!mask.empty()) S += mask.additive;
  for (Eigen::Index k = 0; k < M; ++k)
    if (!qw.valid[std::size_t(k)]) S.col(k).setConstant(kMasked);

  c.E.setZero(nq, M);
  c.denom.setZero(nq);
  c.fallback.assign(std::size_t(nq), 0);
  c.empty_row.assign(std::size_t(nq), 0);
  for (Eigen::Index i = 0; i < nq; ++i) {
    const double mx = S.row(i).maxCoeff();
    if (mx == kMasked) {
      if (!zero_masked_rows) throw ValidationError("operator attention: query row " + std::to_string(i) + " fully masked");
      c.empty_row[std::size_t(i)] = 1;
      continue;
    }
    for (Eigen::Index k = 0; k < M; ++k) c.E(i, k) = S(i, k) == kMasked ? 0.0 : std::exp(S(i, k) - mx);
    double d = 0.0;
    for (Eigen::Index k = 0; k < M; ++k) {
      const long p = qw.prev[std::size_t(k)];
      if (p >= 0) d += 0.5 * (c.E(i, k) + c.E(i, p)) * qw.increment[std::size_t(k)];
    }
    if (d <= 0.0) {
      c.fallback[std::size_t(i)] = 1;
      for (Eigen::Index k = 0; k < M; ++k) d += c.E(i, k) * qw.weight[std::size_t(k)];
      if (d <= 0.0) throw ValidationError("operator attention: zero quadrature mass for query " + std::to_string(i));
    }
    c.denom(i) = d;
  }
  const RowVec w = Eigen::Map<const RowVec>(qw.weight.data(), M);
  Mat Ew = c.E.array().rowwise() * w.array();
  c.out = Ew * V;
  for (Eigen::Index i = 0; i < nq; ++i) c.out.row(i) /= (c.empty_row[std::size_t(i)] ? 1.0 : c.denom(i));
  return c.out;
}

struct OpAttnGrads {
  Mat dQ, dK, dV;
};

inline OpAttnGrads operator_attention_backward(const Mat& Q, const Mat& K, const Mat& V, const QuadratureWeights& qw,
                                               const OpAttnCache& c, const Mat& dout) {
  const Eigen::Index nq = Q.rows(), M = K.rows();
  const RowVec w = Eigen::Map<const RowVec>(qw.weight.data(), M);
  // Denominator coefficient per key: d(denom)/dE_k.
  RowVec coef = RowVec::Zero(M);
  for (Eigen::Index k = 0; k < M; ++k) {
    const long p = qw.prev[std::size_t(k)];
    if (p < 0) continue;
    coef(k) += 0.5 * qw.increment[std::size_t(k)];
    coef(p) += 0.5 * qw.increment[std::size_t(k)];
  }
  Mat dN = dout;
  Eigen::VectorXd dD(nq);
  for (Eigen::Index i = 0; i < nq; ++i) {
    if (c.empty_row[std::size_t(i)]) {
      dN.row(i).setZero();
      dD(i) = 0.0;
      continue;
    }
    dN.row(i) /= c.denom(i);
    dD(i) = -dout.row(i).dot(c.out.row(i)) / c.denom(i);
  }
  Mat dE = (dN * V.transpose()).array().rowwise() * w.array();
  for (Eigen::Index i = 0; i < nq; ++i) dE.row(i) += dD(i) * (c.fallback[std::size_t(i)] ? w : coef);
  OpAttnGrads g;
  const Mat Ew = c.E.array().rowwise() * w.array();
  g.dV = Ew.transpose() * dN;
  const Mat dS = dE.cwiseProduct(c.E) * c.scale;
  g.dQ = dS * K;
  g.dK = dS.transpose() * Q;
  return g;
}

// Multi-head operator attention with learned projections
//   out = concat_h OpAttn(x_q W_Q^h, x_kv W_K^h, x_kv W_V^h) W_O.
struct MultiHeadOpAttn {
  std::string name;
  std::size_t dim = 0;
  std::size_t heads = 1;

  nn::Linear proj(const char* which) const { return {name + "." + which, dim, dim}; }

  void init(ParamStore& p, Rng& rng) const {
    if (heads == 0 || dim % heads != 0) throw ValidationError(name + ": dim must be divisible by heads");
    for (const char* w : {"q", "k", "v", "o"}) proj(w).init(p, rng);
  }

  struct Cache {
    Mat xq, xkv, Q, K, V, concat;
    std::vector<OpAttnCache> head;
  };

  Mat forward(const ParamStore& p, const Mat& xq, const Mat& xkv, const AttentionMask& mask, const QuadratureWeights& qw,
              Cache& c) const {
    c.xq = xq;
    c.xkv = xkv;
    c.Q = proj("q").forward(p, xq);
    c.K = proj("k").forward(p, xkv);
    c.V = proj("v").forward(p, xkv);
    const Eigen::Index dh = Eigen::Index(dim / heads);
    c.concat.resize(xq.rows(), Eigen::Index(dim));
    c.head.assign(heads, OpAttnCache{});
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index off = Eigen::Index(h) * dh;
      c.concat.middleCols(off, dh) = operator_attention(c.Q.middleCols(off, dh), c.K.middleCols(off, dh),
                                                        c.V.middleCols(off, dh), mask, qw, &c.head[h]);
    }
    return proj("o").forward(p, c.concat);
  }

  // Returns (dxq, dxkv).
  std::pair<Mat, Mat> backward(const ParamStore& p, ParamStore& g, const QuadratureWeights& qw, const Cache& c,
                               const Mat& dy) const {
    const Mat dconcat = proj("o").backward(p, g, c.concat, dy);
    const Eigen::Index dh = Eigen::Index(dim / heads);
    Mat dQ(c.Q.rows(), c.Q.cols()), dK(c.K.rows(), c.K.cols()), dV(c.V.rows(), c.V.cols());
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index off = Eigen::Index(h) * dh;
      auto gh = operator_attention_backward(c.Q.middleCols(off, dh), c.K.middleCols(off, dh), c.V.middleCols(off, dh),
                                            qw, c.head[h], dconcat.middleCols(off, dh));
      dQ.middleCols(off, dh) = gh.dQ;
      dK.middleCols(off, dh) = gh.dK;
      dV.middleCols(off, dh) = gh.dV;
    }
    Mat dxq = proj("q").backward(p, g, c.xq, dQ);
    Mat dxkv = proj("k").backward(p, g, c.xkv, dK);
    dxkv += proj("v").backward(p, g, c.xkv, dV);
    return {std::move(dxq), std::move(dxkv)};
  }
};

// Convenience wrappers matching the self/cross variants.
inline Mat self_op_attn(const MultiHeadOpAttn& a, const ParamStore& p, const Mat& x, const AttentionMask& mask,
                        const QuadratureWeights& qw, MultiHeadOpAttn::Cache& c) {
  return a.forward(p, x, x, mask, qw, c);
}

inline Mat cross_op_attn(const MultiHeadOpAttn& a, const ParamStore& p, const Mat& x, const Mat& y,
                         const AttentionMask& mask, const QuadratureWeights& y_weights, MultiHeadOpAttn::Cache& c) {
  return a.forward(p, x, y, mask, y_weights, c);
}

}  // namespace funkflow::attn
