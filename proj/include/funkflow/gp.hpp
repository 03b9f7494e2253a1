#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "funkflow/errors.hpp"
#include "funkflow/random.hpp"

namespace funkflow::gp {

// k(a, b) = variance * exp(-(a - b)^2 / (4 l^2))
struct RBFKernel {
  double variance = 1e-4;
  double length_scale = 1.7e-3;

  double operator()(double a, double b) const {
    const double d = a - b;
    return variance * std::exp(-d * d / (4.0 * length_scale * length_scale));
  }
  void validate() const {
    if (!(variance > 0.0) || !(length_scale > 0.0)) throw ValidationError("RBF kernel needs variance > 0, length_scale > 0");
  }
};

inline constexpr double kDefaultJitter = 1e-7;

inline Eigen::MatrixXd kernel_matrix(const std::vector<double>& a, const std::vector<double>& b, const RBFKernel& k) {
  Eigen::MatrixXd K(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) K(Eigen::Index(i), Eigen::Index(j)) = k(a[i], b[j]);
  return K;
}

inline void require_increasing(const std::vector<double>& t, const char* what) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) throw ValidationError(std::string(what) + ": non-finite time");
    if (i > 0 && !(t[i] > t[i - 1])) throw ValidationError(std::string(what) + ": times must be strictly increasing");
  }
}

struct Factor {
  Eigen::MatrixXd lower;
  double jitter = 0.0;  // jitter that succeeded
};

// Cholesky of A + eps I, escalating eps -> 10 eps -> 100 eps.
inline Factor cholesky_with_jitter(const Eigen::MatrixXd& A, double eps) {
  const Eigen::Index n = A.rows();
  for (double scale : {1.0, 10.0, 100.0}) {
    const double j = eps * scale;
    Eigen::LLT<Eigen::MatrixXd> llt(A + j * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() != Eigen::Success) continue;
    Eigen::MatrixXd L = llt.matrixL();
    if ((L.diagonal().array() > 0.0).all() && L.allFinite()) return {std::move(L), j};
  }
  throw CholeskyFailure("Cholesky factorization failed after jitter escalation");
}

inline Eigen::VectorXd standard_normal(Eigen::Index n, Rng& rng) {
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = rng.normal();
  return z;
}

// Draw from Normal(0, K + eps I) on `times`.
inline std::vector<double> gp_prior_sample(const std::vector<double>& times, const RBFKernel& k, double jitter,
                                           Rng& rng) {
  require_increasing(times, "GP prior");
  k.validate();
  if (times.empty()) return {};
  const auto F = cholesky_with_jitter(kernel_matrix(times, times, k), jitter);
  const Eigen::VectorXd x = F.lower * standard_normal(Eigen::Index(times.size()), rng);
  return {x.data(), x.data() + x.size()};
}

// Exact GP regression on (train_times, train_values) with jitter eps.
class GPPosterior {
 public:
  GPPosterior(std::vector<double> train_times, const std::vector<double>& train_values, RBFKernel kernel,
              double jitter = kDefaultJitter)
      : times_(std::move(train_times)), kernel_(kernel) {
    if (times_.empty()) throw ValidationError("GP posterior needs at least one training point");
    if (train_values.size() != times_.size()) throw ValidationError("GP posterior: times/values length mismatch");
    require_increasing(times_, "GP posterior");
    kernel_.validate();
    auto F = cholesky_with_jitter(kernel_matrix(times_, times_, kernel_), jitter);
    lower_ = std::move(F.lower);
    jitter_ = F.jitter;
    const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(train_values.data(), Eigen::Index(train_values.size()));
    alpha_ = lower_.transpose().triangularView<Eigen::Upper>().solve(lower_.triangularView<Eigen::Lower>().solve(y));
  }

  const Eigen::MatrixXd& cholesky() const { return lower_; }
  double jitter() const { return jitter_; }
  const RBFKernel& kernel() const { return kernel_; }
  const std::vector<double>& train_times() const { return times_; }

  Eigen::VectorXd mean(const std::vector<double>& query) const { return kernel_matrix(query, times_, kernel_) * alpha_; }

  Eigen::MatrixXd covariance(const std::vector<double>& query) const {
    const Eigen::MatrixXd Ktq = kernel_matrix(times_, query, kernel_);
    const Eigen::MatrixXd V = lower_.triangularView<Eigen::Lower>().solve(Ktq);
    Eigen::MatrixXd S = kernel_matrix(query, query, kernel_) - V.transpose() * V;
    return 0.5 * (S + S.transpose());
  }

  // Draw from Normal(mu*, Sigma* + eps I).
  std::vector<double> sample(const std::vector<double>& query, Rng& rng) const {
    require_increasing(query, "GP posterior query");
    if (query.empty()) return {};
    const Eigen::VectorXd mu = mean(query);
    const auto F = cholesky_with_jitter(covariance(query), jitter_);
    const Eigen::VectorXd x = mu + F.lower * standard_normal(mu.size(), rng);
    return {x.data(), x.data() + x.size()};
  }

 private:
  std::vector<double> times_;
  RBFKernel kernel_;
  Eigen::MatrixXd lower_;
  Eigen::VectorXd alpha_;
  double jitter_ = 0.0;
};

inline double softplus(double x) { return x > 20.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline std::vector<double> softplus_transform(std::vector<double> v) {
  for (double& x : v) x = softplus(x);
  return v;
}

struct Prefix {
  std::vector<double> times;
  std::vector<double> values;
};

// Source sample on future_times: softplus of a GP prior draw, or of a GP
// posterior draw conditioned on the raw prefix when one is given.
inline std::vector<double> reference_sample(const std::optional<Prefix>& prefix, const std::vector<double>& future_times,
                                            const RBFKernel& k, double jitter, Rng& rng) {
  if (!prefix || prefix->times.empty()) return softplus_transform(gp_prior_sample(future_times, k, jitter, rng));
  if (!future_times.empty() && !(prefix->times.back() < future_times.front()))
    throw ValidationError("reference sample: prefix must precede future times");
  GPPosterior post(prefix->times, prefix->values, k, jitter);
  return softplus_transform(post.sample(future_times, rng));
}

}  // namespace funkflow::gp
