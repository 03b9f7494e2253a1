#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "funkflow/errors.hpp"
#include "funkflow/flow_model.hpp"
#include "funkflow/flow_train.hpp"
#include "funkflow/gp.hpp"
#include "funkflow/parallel.hpp"
#include "funkflow/random.hpp"

namespace funkflow::flow {

enum class OdeMethod { Euler, RK4 };

inline constexpr std::size_t kDefaultFlowSteps = 100;

// Field evaluated for a whole set of states at one flow time.
using BatchField = std::function<std::vector<std::vector<double>>(double t, const std::vector<std::vector<double>>& z)>;

// Fixed-step integration of dz/dt = field(t, z) over t in [0, 1] for a set
// of states that share the time grid.
inline std::vector<std::vector<double>> integrate_states(std::vector<std::vector<double>> z, const BatchField& field,
                                                         std::size_t steps = kDefaultFlowSteps,
                                                         OdeMethod method = OdeMethod::Euler) {
  if (steps == 0) throw ValidationError("integration needs at least one step");
  const double h = 1.0 / double(steps);
  auto axpy = [](const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b, double s) {
    auto out = a;
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < a[i].size(); ++j) out[i][j] += s * b[i][j];
    return out;
  };
  for (std::size_t s = 0; s < steps; ++s) {
    const double t = double(s) * h;
    if (method == OdeMethod::Euler) {
      const auto v = field(t, z);
      for (std::size_t i = 0; i < z.size(); ++i)
        for (std::size_t j = 0; j < z[i].size(); ++j) z[i][j] += h * v[i][j];
    } else {
      const auto k1 = field(t, z);
      const auto k2 = field(t + 0.5 * h, axpy(z, k1, 0.5 * h));
      const auto k3 = field(t + 0.5 * h, axpy(z, k2, 0.5 * h));
      const auto k4 = field(t + h, axpy(z, k3, h));
      for (std::size_t i = 0; i < z.size(); ++i)
        for (std::size_t j = 0; j < z[i].size(); ++j)
          z[i][j] += h / 6.0 * (k1[i][j] + 2.0 * k2[i][j] + 2.0 * k3[i][j] + k4[i][j]);
    }
    for (const auto& zi : z)
      for (double v : zi)
        if (!std::isfinite(v)) throw IntegrationFailure(s + 1);
  }
  return z;
}

// Transports every state in `targets` (target.z holds z0) with the learned
// field. The context encoding depends on t only, so it is computed once per
// stage and shared by all states.
inline std::vector<std::vector<double>> integrate_flow(const FlowModel& model, const std::vector<TargetState>& targets,
                                                       const StudyBatch& context,
                                                       std::size_t steps = kDefaultFlowSteps,
                                                       OdeMethod method = OdeMethod::Euler) {
  std::vector<std::vector<double>> z0;
  for (const auto& t : targets) z0.push_back(t.z);
  BatchField field = [&](double t, const std::vector<std::vector<double>>& z) {
    const Mat h = model.encode(context, t);
    std::vector<std::vector<double>> v(z.size());
    parallel_for(z.size(), [&](std::size_t i) {
      TargetState st = targets[i];
      st.z = z[i];
      const Eigen::VectorXd f = model.masked_field(st, t, h, context);
      v[i].assign(f.data(), f.data() + f.size());
    });
    return v;
  };
  return integrate_states(std::move(z0), field, steps, method);
}

inline std::vector<double> integrate_flow(const FlowModel& model, const TargetState& target, const StudyBatch& context,
                                          std::size_t steps = kDefaultFlowSteps, OdeMethod method = OdeMethod::Euler) {
  return integrate_flow(model, std::vector<TargetState>{target}, context, steps, method).front();
}

struct InferenceOptions {
  std::size_t steps = kDefaultFlowSteps;
  OdeMethod method = OdeMethod::Euler;
  bool zero_field = false;  // skip the network: the flow is the identity map
};

inline std::vector<std::vector<double>> transport(const FlowModel& model, const std::vector<TargetState>& states,
                                                  const StudyBatch& ctx, const InferenceOptions& opt) {
  if (opt.zero_field) {
    std::vector<std::vector<double>> z;
    z.reserve(states.size());
    for (const auto& st : states) z.push_back(st.z);
    return z;
  }
  return integrate_flow(model, states, ctx, opt.steps, opt.method);
}

// Population synthesis: p = 0, GP-prior source on the query grid. Doses are
// drawn uniformly from the context individuals unless `dose` is given.
// Returns n_samples trajectories on query_times in original units.
inline std::vector<std::vector<double>> synthesize_population(const FlowModel& model, const pk::Study& study,
                                                              std::size_t n_samples,
                                                              const std::vector<double>& query_times, Rng& rng,
                                                              std::optional<pk::DoseSpec> dose = std::nullopt,
                                                              const InferenceOptions& opt = {}) {
  if (query_times.empty()) throw ValidationError("synthesis needs at least one query time");
  const StudyBatch ctx = normalize_study(study);
  const auto& sc = ctx.scales;
  std::vector<double> tau(query_times.size());
  for (std::size_t j = 0; j < tau.size(); ++j) tau[j] = sc.norm_time(query_times[j]);
  gp::require_increasing(tau, "synthesis query");
  std::vector<TargetState> states(n_samples);
  std::vector<double> amounts(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    auto& st = states[i];
    const pk::DoseSpec u =
        dose ? *dose : study.individuals[std::size_t(rng.uniform_int(0, long(study.individuals.size()) - 1))].dose;
    amounts[i] = u.amount;
    st.times = tau;
    st.prefix_len = 0;
    st.dose = sc.norm_dose(u.amount);
    st.route = u.route;
    st.z = gp::reference_sample(std::nullopt, tau, model.config().kernel, model.config().jitter, rng);
  }
  auto z1 = transport(model, states, ctx, opt);
  for (std::size_t i = 0; i < z1.size(); ++i)
    for (double& v : z1[i]) v = std::max(0.0, sc.denorm_conc(v, amounts[i]));
  return z1;
}

inline const std::vector<double>& summary_levels() {
  static const std::vector<double> levels{0.025, 0.10, 0.25, 0.50, 0.75, 0.90, 0.975};
  return levels;
}

// Linear-interpolation empirical quantile of an unsorted sample.
inline double empirical_quantile(std::vector<double> v, double q) {
  if (v.empty()) throw ValidationError("quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const auto lo = std::size_t(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

struct PredictiveSummary {
  std::vector<double> times;
  std::vector<double> mean;
  std::vector<double> levels;                  // quantile levels
  std::vector<std::vector<double>> quantiles;  // [level][time]

  const std::vector<double>& quantile(double level) const {
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (std::abs(levels[i] - level) < 1e-12) return quantiles[i];
    throw ValidationError("quantile level not in summary");
  }
};

inline PredictiveSummary summarize(const std::vector<double>& times, const std::vector<std::vector<double>>& samples) {
  if (samples.empty()) throw ValidationError("cannot summarize zero samples");
  PredictiveSummary s;
  s.times = times;
  s.levels = summary_levels();
  const std::size_t T = times.size();
  s.mean.assign(T, 0.0);
  s.quantiles.assign(s.levels.size(), std::vector<double>(T, 0.0));
  std::vector<double> column(samples.size());
  for (std::size_t j = 0; j < T; ++j) {
    for (std::size_t i = 0; i < samples.size(); ++i) column[i] = samples[i][j];
    double m = 0.0;
    for (double v : column) m += v;
    s.mean[j] = m / double(column.size());
    for (std::size_t q = 0; q < s.levels.size(); ++q) s.quantiles[q][j] = empirical_quantile(column, s.levels[q]);
  }
  return s;
}

struct Forecast {
  std::vector<double> times;  // prefix then future, original units
  std::size_t prefix_len = 0;
  std::vector<std::vector<double>> samples;
  PredictiveSummary summary;
};

// Prefix-conditioned forecasting of one individual against a context study.
inline Forecast forecast_individual(const FlowModel& model, const pk::Study& context, const gp::Prefix& prefix,
                                    const pk::DoseSpec& dose, const std::vector<double>& future_times,
                                    std::size_t n_samples, Rng& rng, const InferenceOptions& opt = {}) {
  if (prefix.times.empty() || prefix.times.size() != prefix.values.size())
    throw ValidationError("forecast needs a non-empty prefix with matching values");
  if (future_times.empty()) throw ValidationError("forecast needs at least one future time");
  if (!(future_times.front() > prefix.times.back())) throw ValidationError("future times must follow the prefix");
  if (n_samples == 0) throw ValidationError("forecast needs at least one sample");
  const StudyBatch ctx = normalize_study(context);
  const auto& sc = ctx.scales;
  const std::size_t p = prefix.times.size();

  TargetState base;
  for (double t : prefix.times) base.times.push_back(sc.norm_time(t));
  for (double t : future_times) base.times.push_back(sc.norm_time(t));
  gp::require_increasing(base.times, "forecast grid");
  base.prefix_len = p;
  base.dose = sc.norm_dose(dose.amount);
  base.route = dose.route;
  gp::Prefix norm_prefix{{base.times.begin(), base.times.begin() + long(p)}, {}};
  for (double y : prefix.values) norm_prefix.values.push_back(sc.norm_conc(y, dose.amount));
  const std::vector<double> tau_f(base.times.begin() + long(p), base.times.end());
  gp::GPPosterior post(norm_prefix.times, norm_prefix.values, model.config().kernel, model.config().jitter);

  std::vector<TargetState> states(n_samples, base);
  for (auto& st : states) {
    st.z = norm_prefix.values;
    const auto x_f = gp::softplus_transform(post.sample(tau_f, rng));
    st.z.insert(st.z.end(), x_f.begin(), x_f.end());
  }
  auto z1 = transport(model, states, ctx, opt);

  Forecast out;
  out.times = prefix.times;
  out.times.insert(out.times.end(), future_times.begin(), future_times.end());
  out.prefix_len = p;
  for (auto& traj : z1) {
    // Past slots are reported as observed; the flow never moves them.
    for (std::size_t j = 0; j < p; ++j) traj[j] = prefix.values[j];
    for (std::size_t j = p; j < traj.size(); ++j) traj[j] = std::max(0.0, sc.denorm_conc(traj[j], dose.amount));
  }
  out.samples = std::move(z1);
  out.summary = summarize(out.times, out.samples);
  return out;
}

}  // namespace funkflow::flow
