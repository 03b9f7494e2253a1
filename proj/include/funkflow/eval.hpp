#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "funkflow/errors.hpp"
#include "funkflow/flow_infer.hpp"
#include "funkflow/flow_model.hpp"
#include "funkflow/pk_sim.hpp"
#include "funkflow/random.hpp"

namespace funkflow::eval {

inline constexpr double kLogFloor = 1e-6;

// sqrt(mean((log max(pred, d) - log max(obs, d))^2))
inline double log_rmse(const std::vector<double>& pred, const std::vector<double>& obs) {
  if (pred.empty()) throw ValidationError("log-RMSE of an empty evaluation set");
  if (pred.size() != obs.size()) throw ValidationError("log-RMSE: length mismatch");
  double ss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = std::log(std::max(pred[i], kLogFloor)) - std::log(std::max(obs[i], kLogFloor));
    ss += r * r;
  }
  return std::sqrt(ss / double(pred.size()));
}

struct Coverage {
  double c50 = 0.0, c80 = 0.0, c95 = 0.0;
  std::size_t n = 0;
};

// Fraction of observations inside the central 50/80/95% predictive intervals.
inline Coverage interval_coverage(const flow::PredictiveSummary& s, const std::vector<double>& observed) {
  if (observed.empty()) throw ValidationError("coverage of an empty evaluation set");
  if (observed.size() != s.times.size()) throw ValidationError("coverage: length mismatch");
  auto frac = [&](double lo, double hi) {
    const auto& a = s.quantile(lo);
    const auto& b = s.quantile(hi);
    std::size_t in = 0;
    for (std::size_t j = 0; j < observed.size(); ++j) in += a[j] <= observed[j] && observed[j] <= b[j];
    return double(in) / double(observed.size());
  };
  return {frac(0.25, 0.75), frac(0.10, 0.90), frac(0.025, 0.975), observed.size()};
}

// Predictive summary on `future_times` given a context study, an observed
// prefix and the subject's dose.
using Forecaster = std::function<flow::PredictiveSummary(const pk::Study& context, const gp::Prefix& prefix,
                                                         const pk::DoseSpec& dose,
                                                         const std::vector<double>& future_times, Rng& rng)>;

inline flow::PredictiveSummary future_part(const flow::Forecast& f) {
  const std::size_t p = f.prefix_len;
  flow::PredictiveSummary s;
  s.times.assign(f.summary.times.begin() + long(p), f.summary.times.end());
  s.mean.assign(f.summary.mean.begin() + long(p), f.summary.mean.end());
  s.levels = f.summary.levels;
  for (const auto& q : f.summary.quantiles) s.quantiles.emplace_back(q.begin() + long(p), q.end());
  return s;
}

inline Forecaster model_forecaster(const flow::FlowModel& model, std::size_t n_samples,
                                   flow::InferenceOptions opt = {}) {
  return [&model, n_samples, opt](const pk::Study& ctx, const gp::Prefix& prefix, const pk::DoseSpec& dose,
                                  const std::vector<double>& future, Rng& rng) {
    return future_part(flow::forecast_individual(model, ctx, prefix, dose, future, n_samples, rng, opt));
  };
}

struct LooRow {
  std::string study_id;
  std::string subject_id;
  double log_rmse = 0.0;
  std::size_t n_future = 0;
  Coverage coverage;
};

struct StudyScore {
  std::string study_id;
  double mean = 0.0;
  double sd = 0.0;
  std::size_t n = 0;
};

struct LooReport {
  std::vector<LooRow> rows;
  std::vector<StudyScore> per_study;
  std::size_t skipped = 0;

  Coverage pooled_coverage() const {
    Coverage c;
    for (const auto& r : rows) {
      c.c50 += r.coverage.c50 * double(r.coverage.n);
      c.c80 += r.coverage.c80 * double(r.coverage.n);
      c.c95 += r.coverage.c95 * double(r.coverage.n);
      c.n += r.coverage.n;
    }
    if (c.n > 0) {
      c.c50 /= double(c.n);
      c.c80 /= double(c.n);
      c.c95 /= double(c.n);
    }
    return c;
  }
};

// Leave-one-individual-out forecasting: each eligible subject is removed
// from the context, conditioned on its first prefix_len samples, and scored
// on the remainder. Subjects with <= prefix_len observations are skipped.
inline LooReport loo_forecast_eval(const Forecaster& forecaster, const std::vector<pk::Study>& studies,
                                   std::size_t prefix_len, std::uint64_t seed) {
  if (prefix_len == 0) throw ValidationError("prefix length must be at least 1");
  std::size_t eligible = 0;
  for (const auto& s : studies)
    for (const auto& ind : s.individuals) eligible += ind.times.size() > prefix_len && s.individuals.size() > 1;
  if (eligible == 0)
    throw ValidationError("no subject has more than " + std::to_string(prefix_len) +
                          " observations (or a non-empty context); nothing to evaluate");
  LooReport rep;
  for (std::size_t si = 0; si < studies.size(); ++si) {
    const auto& study = studies[si];
    std::vector<double> scores;
    for (std::size_t i = 0; i < study.individuals.size(); ++i) {
      const auto& ind = study.individuals[i];
      if (ind.times.size() <= prefix_len || study.individuals.size() < 2) {
        ++rep.skipped;
        continue;
      }
      const auto ctx = flow::without_subject(study, i);
      gp::Prefix prefix{{ind.times.begin(), ind.times.begin() + long(prefix_len)},
                        {ind.concentrations.begin(), ind.concentrations.begin() + long(prefix_len)}};
      const std::vector<double> fut_t(ind.times.begin() + long(prefix_len), ind.times.end());
      const std::vector<double> fut_y(ind.concentrations.begin() + long(prefix_len), ind.concentrations.end());
      Rng rng(derive_seed(seed, {std::uint64_t(si), std::uint64_t(i)}));
      const auto summary = forecaster(ctx, prefix, ind.dose, fut_t, rng);
      LooRow row{study.study_id, ind.id, log_rmse(summary.mean, fut_y), fut_y.size(),
                 interval_coverage(summary, fut_y)};
      scores.push_back(row.log_rmse);
      rep.rows.push_back(row);
    }
    if (scores.empty()) continue;
    StudyScore sc{study.study_id, 0.0, 0.0, scores.size()};
    for (double v : scores) sc.mean += v / double(scores.size());
    for (double v : scores) sc.sd += (v - sc.mean) * (v - sc.mean);
    sc.sd = scores.size() > 1 ? std::sqrt(sc.sd / double(scores.size() - 1)) : 0.0;
    rep.per_study.push_back(sc);
  }
  return rep;
}

// n_rep replicate populations, each holding one concentration vector per
// study individual at that individual's observed times: [rep][ind][obs].
using PopulationSimulator =
    std::function<std::vector<std::vector<std::vector<double>>>(const pk::Study& study, std::size_t n_rep, Rng& rng)>;

inline PopulationSimulator model_population_simulator(const flow::FlowModel& model, flow::InferenceOptions opt = {}) {
  return [&model, opt](const pk::Study& study, std::size_t n_rep, Rng& rng) {
    std::vector<std::vector<std::vector<double>>> out(n_rep, std::vector<std::vector<double>>(study.individuals.size()));
    for (std::size_t i = 0; i < study.individuals.size(); ++i) {
      const auto& ind = study.individuals[i];
      const auto s = flow::synthesize_population(model, study, n_rep, ind.times, rng, ind.dose, opt);
      for (std::size_t r = 0; r < n_rep; ++r) out[r][i] = s[r];
    }
    return out;
  };
}

inline PopulationSimulator prior_population_simulator(const pk::MetaStudyPrior& prior) {
  return [prior](const pk::Study& study, std::size_t n_rep, Rng& rng) {
    std::vector<std::vector<std::vector<double>>> out(n_rep);
    for (std::size_t r = 0; r < n_rep; ++r)
      for (const auto& ind : study.individuals)
        out[r].push_back(pk::resimulate_at_times(prior, study.seed, ind.dose, ind.times, rng));
    return out;
  };
}

struct VpcBin {
  double t_lo = 0.0, t_hi = 0.0;
  std::size_t n_obs = 0;
  std::vector<double> simulated;  // one value per requested percentile
  std::vector<double> observed;
  double fraction_inside = 0.0;  // observations within [lowest, highest] simulated percentile
};

struct VpcTable {
  std::vector<double> percentiles;
  std::vector<VpcBin> bins;
  double band_coverage = 0.0;  // pooled over bins
};

// Equal-count time bins over the observed sampling times; edges span
// [0, max time].
inline std::vector<double> equal_count_edges(std::vector<double> times, std::size_t n_bins) {
  if (times.empty() || n_bins == 0) throw ValidationError("VPC binning needs observations and bins");
  std::sort(times.begin(), times.end());
  std::vector<double> edges{0.0};
  for (std::size_t b = 1; b < n_bins; ++b) {
    const double e = flow::empirical_quantile(times, double(b) / double(n_bins));
    if (e > edges.back() && e < times.back()) edges.push_back(e);
  }
  edges.push_back(std::max(times.back(), edges.back()));
  if (edges.size() < 2 || edges.back() <= edges.front()) edges = {0.0, std::max(times.back(), 1e-12)};
  return edges;
}

inline VpcTable vpc(const PopulationSimulator& sim, const pk::Study& study, std::size_t n_replicates, Rng& rng,
                    std::vector<double> percentiles = {10, 50, 90}, std::size_t n_bins = 8) {
  if (n_replicates < 100) throw ValidationError("VPC needs at least 100 replicates");
  if (percentiles.size() < 2) throw ValidationError("VPC needs at least two percentiles");
  std::sort(percentiles.begin(), percentiles.end());
  std::vector<double> all_t;
  for (const auto& ind : study.individuals) all_t.insert(all_t.end(), ind.times.begin(), ind.times.end());
  const auto edges = equal_count_edges(all_t, n_bins);
  auto bin_of = [&](double t) {
    const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, t);
    return std::size_t(it - (edges.begin() + 1));
  };
  const auto reps = sim(study, n_replicates, rng);

  const std::size_t nb = edges.size() - 1;
  std::vector<std::vector<double>> sim_vals(nb), obs_vals(nb);
  for (std::size_t i = 0; i < study.individuals.size(); ++i) {
    const auto& ind = study.individuals[i];
    for (std::size_t k = 0; k < ind.times.size(); ++k) {
      const std::size_t b = bin_of(ind.times[k]);
      obs_vals[b].push_back(ind.concentrations[k]);
      for (const auto& r : reps) sim_vals[b].push_back(r[i][k]);
    }
  }
  VpcTable table;
  table.percentiles = percentiles;
  std::size_t inside = 0, total = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    VpcBin bin;
    bin.t_lo = edges[b];
    bin.t_hi = edges[b + 1];
    bin.n_obs = obs_vals[b].size();
    if (bin.n_obs == 0) continue;
    for (double p : percentiles) {
      bin.simulated.push_back(flow::empirical_quantile(sim_vals[b], p / 100.0));
      bin.observed.push_back(flow::empirical_quantile(obs_vals[b], p / 100.0));
    }
    std::size_t in = 0;
    for (double y : obs_vals[b]) in += bin.simulated.front() <= y && y <= bin.simulated.back();
    bin.fraction_inside = double(in) / double(bin.n_obs);
    inside += in;
    total += bin.n_obs;
    table.bins.push_back(bin);
  }
  table.band_coverage = total ? double(inside) / double(total) : 0.0;
  return table;
}

struct Trajectory {
  std::vector<double> times;
  std::vector<double> values;
};

// Rows are trajectories linearly resampled onto a shared grid spanning every
// trajectory in both sets (constant beyond each trajectory's ends).
inline std::pair<Mat, Mat> resample_common(const std::vector<Trajectory>& a, const std::vector<Trajectory>& b,
                                           std::size_t grid_points) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* set : {&a, &b})
    for (const auto& tr : *set) {
      if (tr.times.size() < 2 || tr.times.size() != tr.values.size())
        throw ValidationError("MMD trajectories need at least two aligned points");
      lo = std::min(lo, tr.times.front());
      hi = std::max(hi, tr.times.back());
    }
  std::vector<double> grid(grid_points);
  for (std::size_t g = 0; g < grid_points; ++g)
    grid[g] = grid_points == 1 ? lo : lo + (hi - lo) * double(g) / double(grid_points - 1);
  auto fill = [&](const std::vector<Trajectory>& set) {
    Mat m(Eigen::Index(set.size()), Eigen::Index(grid_points));
    for (std::size_t i = 0; i < set.size(); ++i) {
      const auto v = pk::interpolate_linear(set[i].times, set[i].values, grid);
      for (std::size_t g = 0; g < grid_points; ++g) m(Eigen::Index(i), Eigen::Index(g)) = v[g];
    }
    return m;
  };
  return {fill(a), fill(b)};
}

inline Mat pairwise_sq_dist(const Mat& x) {
  const Eigen::VectorXd n = x.rowwise().squaredNorm();
  Mat d = (-2.0 * x * x.transpose()).colwise() + n;
  d.rowwise() += n.transpose();
  return d.cwiseMax(0.0);
}

inline double median_bandwidth(const Mat& pooled) {
  const Mat d = pairwise_sq_dist(pooled);
  std::vector<double> v;
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    for (Eigen::Index j = i + 1; j < d.cols(); ++j) v.push_back(std::sqrt(d(i, j)));
  const double med = v.empty() ? 0.0 : flow::empirical_quantile(v, 0.5);
  return med > 0.0 ? med : 1.0;
}

// Unbiased MMD^2 between the first n_a rows of K's index set and the rest.
inline double mmd2_unbiased(const Mat& K, const std::vector<std::size_t>& idx_a, const std::vector<std::size_t>& idx_b) {
  const double m = double(idx_a.size()), n = double(idx_b.size());
  double kaa = 0.0, kbb = 0.0, kab = 0.0;
  for (std::size_t i = 0; i < idx_a.size(); ++i)
    for (std::size_t j = 0; j < idx_a.size(); ++j)
      if (i != j) kaa += K(Eigen::Index(idx_a[i]), Eigen::Index(idx_a[j]));
  for (std::size_t i = 0; i < idx_b.size(); ++i)
    for (std::size_t j = 0; j < idx_b.size(); ++j)
      if (i != j) kbb += K(Eigen::Index(idx_b[i]), Eigen::Index(idx_b[j]));
  for (auto i : idx_a)
    for (auto j : idx_b) kab += K(Eigen::Index(i), Eigen::Index(j));
  return kaa / (m * (m - 1.0)) + kbb / (n * (n - 1.0)) - 2.0 * kab / (m * n);
}

struct MmdKernelData {
  Mat K;
  std::size_t n_a = 0;
};

inline MmdKernelData mmd_kernel(const std::vector<Trajectory>& a, const std::vector<Trajectory>& b,
                                std::size_t grid_points) {
  if (a.size() < 2 || b.size() < 2) throw ValidationError("MMD needs at least two trajectories per set");
  auto [xa, xb] = resample_common(a, b, grid_points);
  Mat pooled(xa.rows() + xb.rows(), xa.cols());
  pooled << xa, xb;
  const double h = median_bandwidth(pooled);
  MmdKernelData out;
  out.K = (-pairwise_sq_dist(pooled) / (2.0 * h * h)).array().exp();
  out.n_a = a.size();
  return out;
}

inline double mmd_rbf(const std::vector<Trajectory>& a, const std::vector<Trajectory>& b, std::size_t grid_points = 32) {
  const auto kd = mmd_kernel(a, b, grid_points);
  std::vector<std::size_t> ia(kd.n_a), ib(std::size_t(kd.K.rows()) - kd.n_a);
  std::iota(ia.begin(), ia.end(), 0);
  std::iota(ib.begin(), ib.end(), kd.n_a);
  return mmd2_unbiased(kd.K, ia, ib);
}

struct PermutationTest {
  double statistic = 0.0;
  double p_value = 1.0;
};

inline PermutationTest mmd_permutation_test(const std::vector<Trajectory>& a, const std::vector<Trajectory>& b,
                                            std::size_t n_permutations, Rng& rng, std::size_t grid_points = 32) {
  const auto kd = mmd_kernel(a, b, grid_points);
  const std::size_t N = std::size_t(kd.K.rows());
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  auto split = [&](const std::vector<std::size_t>& order) {
    return mmd2_unbiased(kd.K, {order.begin(), order.begin() + long(kd.n_a)}, {order.begin() + long(kd.n_a), order.end()});
  };
  PermutationTest t;
  t.statistic = split(idx);
  std::size_t ge = 0;
  for (std::size_t r = 0; r < n_permutations; ++r) {
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    ge += split(idx) >= t.statistic;
  }
  t.p_value = double(1 + ge) / double(1 + n_permutations);
  return t;
}

}  // namespace funkflow::eval
