#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "funkflow/errors.hpp"
#include "funkflow/random.hpp"
#include "funkflow/tensor.hpp"

namespace funkflow::nn {

// Row-wise primitives with hand-written reverse passes. Every backward
// accumulates into a gradient store that mirrors the parameter store.

inline void check_finite(const Mat& m, const std::string& op) {
  if (!m.allFinite()) throw NonFiniteLoss(op);
}

// Affine map y = x W + b, W stored as (in, out).
struct Linear {
  std::string name;
  std::size_t in = 0, out = 0;

  std::string w() const { return name + ".w"; }
  std::string b() const { return name + ".b"; }

  // Normal(0, 2/(fan_in+fan_out)) weights, zero bias.
  void init(ParamStore& p, Rng& rng) const {
    auto& W = p.add(w(), {in, out});
    const double sd = std::sqrt(2.0 / double(in + out));
    for (auto& v : W.data) v = rng.normal(0.0, sd);
    p.add(b(), {out});
  }

  Mat forward(const ParamStore& p, const Mat& x) const {
    if (std::size_t(x.cols()) != in)
      throw ValidationError(name + ": input has " + std::to_string(x.cols()) + " features, expected " +
                            std::to_string(in));
    Mat y = x * p.at(w()).mat();
    y.rowwise() += p.at(b()).mat().row(0);
    return y;
  }

  Mat backward(const ParamStore& p, ParamStore& g, const Mat& x, const Mat& dy) const {
    g.at(w()).mat().noalias() += x.transpose() * dy;
    g.at(b()).mat().row(0) += dy.colwise().sum();
    return dy * p.at(w()).mat().transpose();
  }
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Mat gelu(const Mat& x) { return x.unaryExpr([](double v) { return gelu(v); }); }
inline Mat gelu_backward(const Mat& x, const Mat& dy) {
  return dy.cwiseProduct(x.unaryExpr([](double v) { return gelu_grad(v); }));
}

// Inverted dropout. An empty mask means identity (evaluation mode).
struct Dropout {
  Mat mask;

  Mat forward(const Mat& x, double rate, Rng* rng) {
    if (rng == nullptr || rate <= 0.0) {
      mask.resize(0, 0);
      return x;
    }
    mask.resize(x.rows(), x.cols());
    const double keep = 1.0 - rate;
    for (Eigen::Index i = 0; i < mask.size(); ++i)
      mask.data()[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
    return x.cwiseProduct(mask);
  }
  Mat backward(const Mat& dy) const { return mask.size() == 0 ? dy : Mat(dy.cwiseProduct(mask)); }
};

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNorm {
  std::string name;
  std::size_t dim = 0;

  struct Cache {
    Mat xhat;
    Eigen::VectorXd rstd;
  };

  void init(ParamStore& p) const {
    auto& g = p.add(name + ".gain", {dim});
    std::fill(g.data.begin(), g.data.end(), 1.0);
    p.add(name + ".shift", {dim});
  }

  Mat forward(const ParamStore& p, const Mat& x, Cache& c) const {
    const Eigen::Index n = x.rows(), d = x.cols();
    c.xhat.resize(n, d);
    c.rstd.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mu = x.row(i).mean();
      const double var = (x.row(i).array() - mu).square().mean();
      c.rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
      c.xhat.row(i) = (x.row(i).array() - mu) * c.rstd(i);
    }
    Mat y = c.xhat.array().rowwise() * p.at(name + ".gain").mat().row(0).array();
    y.rowwise() += p.at(name + ".shift").mat().row(0);
    return y;
  }

  Mat backward(const ParamStore& p, ParamStore& g, const Cache& c, const Mat& dy) const {
    g.at(name + ".gain").mat().row(0) += dy.cwiseProduct(c.xhat).colwise().sum();
    g.at(name + ".shift").mat().row(0) += dy.colwise().sum();
    const Mat dxhat = dy.array().rowwise() * p.at(name + ".gain").mat().row(0).array();
    const double d = double(c.xhat.cols());
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      const double m1 = dxhat.row(i).mean();
      const double m2 = dxhat.row(i).dot(c.xhat.row(i)) / d;
      dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
    }
    return dx;
  }
};

// Affine maps interleaved with GELU; nothing after the final affine.
// Optional dropout after every hidden activation.
struct Mlp {
  std::string name;
  std::vector<std::size_t> dims;  // dims.size() - 1 layers

  struct Cache {
    std::vector<Mat> inputs;  // input of each affine map
    std::vector<Mat> pre;     // pre-activation of each hidden layer
    std::vector<Dropout> drop;
  };

  std::size_t layer_count() const { return dims.size() - 1; }
  Linear layer(std::size_t i) const { return {name + "." + std::to_string(i), dims[i], dims[i + 1]}; }

  void init(ParamStore& p, Rng& rng) const {
    for (std::size_t i = 0; i < layer_count(); ++i) layer(i).init(p, rng);
  }

  Mat forward(const ParamStore& p, const Mat& x, Cache& c, double dropout = 0.0, Rng* rng = nullptr) const {
    const std::size_t L = layer_count();
    c.inputs.assign(L, Mat());
    c.pre.assign(L > 0 ? L - 1 : 0, Mat());
    c.drop.assign(L > 0 ? L - 1 : 0, Dropout{});
    Mat h = x;
    for (std::size_t i = 0; i < L; ++i) {
      c.inputs[i] = h;
      h = layer(i).forward(p, h);
      if (i + 1 < L) {
        c.pre[i] = h;
        h = c.drop[i].forward(gelu(h), dropout, rng);
      }
    }
    return h;
  }

  Mat backward(const ParamStore& p, ParamStore& g, const Cache& c, const Mat& dy) const {
    Mat d = dy;
    for (std::size_t i = layer_count(); i-- > 0;) {
      if (i + 1 < layer_count()) d = gelu_backward(c.pre[i], c.drop[i].backward(d));
      d = layer(i).backward(p, g, c.inputs[i], d);
    }
    return d;
  }
};

// Sinusoidal flow-time features with log-spaced frequencies in [1/f_max, 1].
inline RowVec fourier_time_embed(double t, std::size_t d, double f_max) {
  if (d < 4 || d % 2 != 0) throw ValidationError("time embedding width must be even and >= 4");
  const std::size_t half = d / 2;
  RowVec e(static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < half; ++k) {
    const double omega = std::pow(f_max, -double(k) / double(half - 1));
    e(Eigen::Index(k)) = std::sin(t * omega);
    e(Eigen::Index(half + k)) = std::cos(t * omega);
  }
  return e;
}

}  // namespace funkflow::nn
