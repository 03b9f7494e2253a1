#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "funkflow/errors.hpp"
#include "funkflow/random.hpp"

namespace funkflow::pk {

struct Interval {
  double lo = 0.0, hi = 0.0;
  bool valid() const { return lo <= hi; }
  bool contains(double x) const { return lo <= x && x <= hi; }
};

struct IntInterval {
  long lo = 0, hi = 0;
  bool valid() const { return lo <= hi; }
};

// Hyperprior ranges for one kinetic parameter.
struct ParamRanges {
  Interval log_mean, log_std, tmag, tscl;
};

struct MetaStudyPrior {
  std::vector<std::string> drug_id_options{"Drug_A", "Drug_B", "Drug_C"};
  IntInterval num_individuals_range{5, 10};
  IntInterval num_peripherals_range{1, 3};
  std::string solver_method = "rk4";
  double time_start = 0.0;
  double time_stop = 24.0;
  long time_num_steps = 100;
  ParamRanges k_a{{-1, 2}, {0.15, 0.45}, {0.01, 0.1}, {1, 5}};
  ParamRanges k_e{{-5, 0}, {0.15, 0.45}, {0.01, 0.1}, {1, 5}};
  ParamRanges V{{1, 7}, {0.15, 0.45}, {0.001, 0.01}, {1, 5}};
  ParamRanges k_1p{{-4, 0}, {0.15, 0.45}, {0.01, 0.1}, {1, 5}};
  ParamRanges k_p1{{-4, -1}, {0.15, 0.45}, {0.01, 0.1}, {1, 5}};
  Interval rel_ruv_range{0.01, 0.1};
  Interval dose_range{1.0, 1000.0};
  double oral_probability = 0.7;

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ValidationError("invalid prior: " + what);
    };
    need(num_individuals_range.valid() && num_individuals_range.lo >= 1, "num_individuals_range");
    need(num_peripherals_range.valid() && num_peripherals_range.lo >= 0, "num_peripherals_range");
    need(solver_method == "rk4", "solver_method must be rk4");
    need(time_start < time_stop, "time_start < time_stop");
    need(time_num_steps >= 2, "time_num_steps >= 2");
    const std::pair<const char*, const ParamRanges*> params[] = {
        {"k_a", &k_a}, {"k_e", &k_e}, {"V", &V}, {"k_1p", &k_1p}, {"k_p1", &k_p1}};
    for (const auto& [n, r] : params) {
      const std::string s(n);
      need(r->log_mean.valid(), s + " log-mean range");
      need(r->log_std.valid() && r->log_std.lo >= 0, s + " log-std range");
      need(r->tmag.valid() && r->tmag.lo >= 0, s + " tmag range");
      need(r->tscl.valid() && r->tscl.lo > 0, s + " tscl range");
    }
    need(rel_ruv_range.valid() && rel_ruv_range.lo >= 0 && rel_ruv_range.hi < 1, "rel_ruv_range");
    need(dose_range.valid() && dose_range.lo > 0, "dose_range");
    need(oral_probability >= 0 && oral_probability <= 1, "oral_probability");
    need(!drug_id_options.empty(), "drug_id_options");
  }

  std::vector<double> grid() const {
    std::vector<double> g(static_cast<std::size_t>(time_num_steps));
    const double dt = (time_stop - time_start) / double(time_num_steps - 1);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = time_start + dt * double(i);
    g.back() = time_stop;
    return g;
  }
};

struct OUSpec {
  double mu = 0.0;
  double lambda = 1.0;  // 1/hour
  double sigma = 0.0;   // 1/sqrt(hour)

  double stationary_variance() const { return sigma * sigma / (2.0 * lambda); }
};

struct PeripheralExchange {
  OUSpec log_k_plus, log_k_minus;
};

struct SubjectKinetics {
  OUSpec log_V, log_k_a, log_k_e;
  std::vector<PeripheralExchange> peripherals;
};

enum class Route { Intravenous, Oral };

inline std::string to_string(Route r) { return r == Route::Oral ? "oral" : "iv"; }

struct DoseSpec {
  double amount = 1.0;
  Route route = Route::Intravenous;
};

// Study-level draw of one kinetic parameter's hyperparameters.
struct ParamDraw {
  double log_mean = 0.0, log_std = 0.0, tmag = 0.0, tscl = 1.0;
};

struct StudyConfig {
  std::string drug_id;
  long num_individuals = 0;
  long num_peripherals = 0;
  Route route = Route::Intravenous;
  std::vector<DoseSpec> doses;
  ParamDraw k_a, k_e, V, k_1p, k_p1;
  double rel_ruv = 0.0;
};

// Parameter values (not logs) at each grid point.
struct KineticsPath {
  std::vector<double> V, k_a, k_e;
  std::vector<std::vector<double>> k_plus, k_minus;  // [peripheral][grid]

  std::size_t peripherals() const { return k_plus.size(); }
};

struct DenseTrajectory {
  std::vector<double> grid;
  std::vector<std::vector<double>> states;  // [grid][gut, central, peripherals...]
  std::vector<double> concentration;
};

struct IndividualRecord {
  std::string id;
  DoseSpec dose;
  std::vector<double> times;
  std::vector<double> concentrations;
};

struct Study {
  std::string study_id;
  std::uint64_t seed = 0;
  std::vector<IndividualRecord> individuals;

  void validate() const {
    if (individuals.empty()) throw ValidationError("study " + study_id + " has no individuals");
    for (const auto& ind : individuals) {
      if (ind.times.empty() || ind.times.size() != ind.concentrations.size())
        throw ValidationError("subject " + ind.id + ": times/concentrations length mismatch or empty");
      if (!(ind.dose.amount > 0.0) || !std::isfinite(ind.dose.amount))
        throw ValidationError("subject " + ind.id + ": dose amount must be positive");
      for (std::size_t k = 0; k < ind.times.size(); ++k) {
        if (!std::isfinite(ind.times[k]) || !std::isfinite(ind.concentrations[k]))
          throw ValidationError("subject " + ind.id + ": non-finite value");
        if (ind.concentrations[k] < 0.0) throw ValidationError("subject " + ind.id + ": negative concentration");
        if (k > 0 && !(ind.times[k] > ind.times[k - 1]))
          throw ValidationError("subject " + ind.id + ": times not strictly increasing");
      }
    }
  }
};

inline StudyConfig sample_study_config(const MetaStudyPrior& prior, Rng& rng) {
  StudyConfig c;
  c.drug_id = prior.drug_id_options[std::size_t(rng.uniform_int(0, long(prior.drug_id_options.size()) - 1))];
  c.num_individuals = rng.uniform_int(prior.num_individuals_range.lo, prior.num_individuals_range.hi);
  c.num_peripherals = rng.uniform_int(prior.num_peripherals_range.lo, prior.num_peripherals_range.hi);
  c.route = rng.bernoulli(prior.oral_probability) ? Route::Oral : Route::Intravenous;
  const double log_lo = std::log(prior.dose_range.lo), log_hi = std::log(prior.dose_range.hi);
  for (long i = 0; i < c.num_individuals; ++i) c.doses.push_back({std::exp(rng.uniform(log_lo, log_hi)), c.route});
  auto draw = [&](const ParamRanges& r) {
    ParamDraw d;
    d.log_mean = rng.uniform(r.log_mean.lo, r.log_mean.hi);
    d.log_std = rng.uniform(r.log_std.lo, r.log_std.hi);
    d.tmag = rng.uniform(r.tmag.lo, r.tmag.hi);
    d.tscl = rng.uniform(r.tscl.lo, r.tscl.hi);
    return d;
  };
  c.k_a = draw(prior.k_a);
  c.k_e = draw(prior.k_e);
  c.V = draw(prior.V);
  c.k_1p = draw(prior.k_1p);
  c.k_p1 = draw(prior.k_p1);
  c.rel_ruv = rng.uniform(prior.rel_ruv_range.lo, prior.rel_ruv_range.hi);
  return c;
}

// Exact OU transition over dt with standard-normal innovation xi.
inline double ou_transition(double theta, const OUSpec& s, double dt, double xi) {
  const double decay = std::exp(-s.lambda * dt);
  const double sd = s.sigma * std::sqrt((1.0 - std::exp(-2.0 * s.lambda * dt)) / (2.0 * s.lambda));
  return s.mu + (theta - s.mu) * decay + sd * xi;
}

// Log-parameter path on `grid`. Starts from the stationary law unless an
// initial value is given.
inline std::vector<double> sample_ou_path(const OUSpec& spec, const std::vector<double>& grid, Rng& rng,
                                          std::optional<double> initial = std::nullopt) {
  if (!(spec.lambda > 0.0) || spec.sigma < 0.0) throw ValidationError("OU spec needs lambda > 0, sigma >= 0");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw ValidationError("OU grid must be strictly increasing");
  std::vector<double> path(grid.size());
  if (grid.empty()) return path;
  path[0] = initial ? *initial : spec.mu + std::sqrt(spec.stationary_variance()) * rng.normal();
  for (std::size_t i = 1; i < grid.size(); ++i)
    path[i] = ou_transition(path[i - 1], spec, grid[i] - grid[i - 1], rng.normal());
  return path;
}

namespace detail {

inline void pk_rhs(const std::vector<double>& x, const KineticsPath& k, std::size_t at, std::vector<double>& dx) {
  const std::size_t P = k.peripherals();
  const double ka = k.k_a[at], ke = k.k_e[at];
  dx[0] = -ka * x[0];
  double central = ka * x[0] - ke * x[1];
  for (std::size_t j = 0; j < P; ++j) {
    const double flow = k.k_plus[j][at] * x[1] - k.k_minus[j][at] * x[2 + j];
    central -= flow;
    dx[2 + j] = flow;
  }
  dx[1] = central;
}

}  // namespace detail

// Classic RK4, one step per grid interval, parameters frozen at the left
// endpoint of each step.
inline DenseTrajectory solve_pk_ode(const KineticsPath& k, const DoseSpec& dose, const std::vector<double>& grid) {
  const std::size_t n = grid.size();
  if (n < 2) throw ValidationError("ODE grid needs at least two points");
  if (k.V.size() != n || k.k_a.size() != n || k.k_e.size() != n)
    throw ValidationError("kinetics path length does not match grid");
  const double h = (grid.back() - grid.front()) / double(n - 1);
  for (std::size_t i = 1; i < n; ++i)
    if (std::abs((grid[i] - grid[i - 1]) - h) > 1e-9 * std::max(1.0, std::abs(h)))
      throw ValidationError("ODE grid must be uniform");
  if (dose.amount < 0.0) throw ValidationError("dose amount must be non-negative");

  const std::size_t P = k.peripherals();
  const std::size_t dim = 2 + P;
  DenseTrajectory out;
  out.grid = grid;
  out.states.assign(n, std::vector<double>(dim, 0.0));
  out.concentration.assign(n, 0.0);
  out.states[0][dose.route == Route::Oral ? 0 : 1] = dose.amount;

  std::vector<double> x = out.states[0], k1(dim), k2(dim), k3(dim), k4(dim), tmp(dim);
  for (std::size_t step = 0; step + 1 < n; ++step) {
    detail::pk_rhs(x, k, step, k1);
    for (std::size_t d = 0; d < dim; ++d) tmp[d] = x[d] + 0.5 * h * k1[d];
    detail::pk_rhs(tmp, k, step, k2);
    for (std::size_t d = 0; d < dim; ++d) tmp[d] = x[d] + 0.5 * h * k2[d];
    detail::pk_rhs(tmp, k, step, k3);
    for (std::size_t d = 0; d < dim; ++d) tmp[d] = x[d] + h * k3[d];
    detail::pk_rhs(tmp, k, step, k4);
    double total = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      x[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
      if (!std::isfinite(x[d])) throw SimulationFailure("non-finite compartment amount", step + 1);
      x[d] = std::max(x[d], 0.0);
      total += x[d];
    }
    // The true system only loses mass; growth means the step is unstable.
    if (total > dose.amount * (1.0 + 1e-8)) throw SimulationFailure("unstable step increased total drug amount", step + 1);
    out.states[step + 1] = x;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(k.V[i] > 0.0) || !std::isfinite(k.V[i])) throw SimulationFailure("non-positive volume", i);
    out.concentration[i] = out.states[i][1] / k.V[i];
  }
  return out;
}

struct CharacteristicTimes {
  double t_peak = 0.0;
  double t_half = 0.0;
};

inline CharacteristicTimes characteristic_times(const DenseTrajectory& traj) {
  const auto& c = traj.concentration;
  if (c.empty()) throw DegenerateTrajectory("empty trajectory");
  const auto peak_it = std::max_element(c.begin(), c.end());
  if (!(*peak_it > 0.0)) throw DegenerateTrajectory("all-zero concentration trajectory");
  const std::size_t ip = std::size_t(peak_it - c.begin());
  CharacteristicTimes out{traj.grid[ip], traj.grid.back()};
  for (std::size_t i = ip + 1; i < c.size(); ++i) {
    if (c[i] <= 0.5 * *peak_it) {
      out.t_half = traj.grid[i];
      break;
    }
  }
  return out;
}

inline constexpr double kEarlyWindow = 0.5;  // hours added to 2*T_peak

// Irregular sampling schedule snapped to the simulation grid. Times are in
// (grid[0], time_stop], dense around the absorption phase and spread over
// roughly four half-lives after the peak.
inline std::vector<double> sample_observation_times(double t_peak, double t_half, const std::vector<double>& grid,
                                                    Rng& rng) {
  if (grid.size() < 3) throw ValidationError("observation grid too small");
  const double t0 = grid.front(), stop = grid.back();
  if (t_peak > stop) throw ValidationError("T_peak beyond time_stop");
  const double dt = (stop - t0) / double(grid.size() - 1);
  const long last = long(grid.size()) - 1;
  const long n_obs = rng.uniform_int(5, 15);

  auto index_in = [&](double lo, double hi, double x) {
    long ilo = std::max<long>(1, long(std::ceil((lo - t0) / dt - 1e-9)));
    long ihi = std::min<long>(last, long(std::floor((hi - t0) / dt + 1e-9)));
    if (ihi < ilo) ihi = ilo = std::min<long>(std::max<long>(1, ihi), last);
    long i = long(std::lround((x - t0) / dt));
    return std::clamp(i, ilo, ihi);
  };
  const double early_hi = std::min(2.0 * t_peak + kEarlyWindow, stop);
  const double late_hi = std::min(t_peak + 4.0 * t_half, stop);

  std::set<long> picked;
  for (long attempt = 0; long(picked.size()) < n_obs && attempt < 50 * n_obs; ++attempt) {
    if (rng.bernoulli(0.5)) {
      picked.insert(index_in(t0, early_hi, rng.uniform(t0, early_hi)));
    } else {
      picked.insert(index_in(t_peak, late_hi, rng.uniform(t_peak, late_hi)));
    }
  }
  for (long i = 1; picked.size() < 2 && i <= last; ++i) picked.insert(i);
  std::vector<double> times;
  times.reserve(picked.size());
  for (long i : picked) times.push_back(grid[std::size_t(i)]);
  return times;
}

inline constexpr double kNoiseFloor = 1e-6;

inline std::vector<double> apply_observation_noise(const std::vector<double>& conc, double ruv, Rng& rng) {
  std::vector<double> out(conc.size());
  for (std::size_t i = 0; i < conc.size(); ++i) out[i] = conc[i] * std::max(1.0 + ruv * rng.normal(), kNoiseFloor);
  return out;
}

inline std::vector<double> interpolate_linear(const std::vector<double>& x, const std::vector<double>& y,
                                              const std::vector<double>& query) {
  std::vector<double> out(query.size());
  for (std::size_t q = 0; q < query.size(); ++q) {
    const double t = query[q];
    if (t <= x.front()) {
      out[q] = y.front();
      continue;
    }
    if (t >= x.back()) {
      out[q] = y.back();
      continue;
    }
    const auto it = std::upper_bound(x.begin(), x.end(), t);
    const std::size_t j = std::size_t(it - x.begin());
    const double w = (t - x[j - 1]) / (x[j] - x[j - 1]);
    out[q] = (1.0 - w) * y[j - 1] + w * y[j];
  }
  return out;
}

// Individual-level OU specs: mu ~ Normal(study mean, study std^2),
// lambda = 1/tscl, sigma = tmag.
inline SubjectKinetics sample_subject_kinetics(const StudyConfig& c, Rng& rng) {
  auto spec = [&](const ParamDraw& d) {
    return OUSpec{rng.normal(d.log_mean, d.log_std), 1.0 / d.tscl, d.tmag};
  };
  SubjectKinetics s;
  s.log_V = spec(c.V);
  s.log_k_a = spec(c.k_a);
  s.log_k_e = spec(c.k_e);
  for (long j = 0; j < c.num_peripherals; ++j) {
    PeripheralExchange pe;
    pe.log_k_plus = spec(c.k_1p);
    pe.log_k_minus = spec(c.k_p1);
    s.peripherals.push_back(pe);
  }
  return s;
}

inline KineticsPath sample_kinetics_path(const SubjectKinetics& s, const std::vector<double>& grid, Rng& rng) {
  auto exp_path = [&](const OUSpec& o) {
    auto p = sample_ou_path(o, grid, rng);
    for (double& v : p) v = std::exp(v);
    return p;
  };
  KineticsPath k;
  k.V = exp_path(s.log_V);
  k.k_a = exp_path(s.log_k_a);
  k.k_e = exp_path(s.log_k_e);
  for (const auto& pe : s.peripherals) {
    k.k_plus.push_back(exp_path(pe.log_k_plus));
    k.k_minus.push_back(exp_path(pe.log_k_minus));
  }
  return k;
}

inline constexpr int kMaxSimulationAttempts = 10;

inline IndividualRecord simulate_individual(const StudyConfig& c, const DoseSpec& dose, const std::vector<double>& grid,
                                            Rng& rng, const std::string& id) {
  for (int attempt = 1;; ++attempt) {
    try {
      const auto kin = sample_subject_kinetics(c, rng);
      const auto path = sample_kinetics_path(kin, grid, rng);
      const auto traj = solve_pk_ode(path, dose, grid);
      const auto ct = characteristic_times(traj);
      IndividualRecord rec;
      rec.id = id;
      rec.dose = dose;
      rec.times = sample_observation_times(ct.t_peak, ct.t_half, grid, rng);
      rec.concentrations = apply_observation_noise(interpolate_linear(grid, traj.concentration, rec.times), c.rel_ruv, rng);
      return rec;
    } catch (const NumericalError&) {
      if (attempt >= kMaxSimulationAttempts) throw;
    }
  }
}

inline Study simulate_study(const MetaStudyPrior& prior, std::uint64_t seed, const std::string& study_id = "study") {
  prior.validate();
  Rng rng(seed);
  const auto cfg = sample_study_config(prior, rng);
  const auto grid = prior.grid();
  Study s;
  s.study_id = study_id;
  s.seed = seed;
  for (long i = 0; i < cfg.num_individuals; ++i)
    s.individuals.push_back(
        simulate_individual(cfg, cfg.doses[std::size_t(i)], grid, rng, "subject-" + std::to_string(i)));
  return s;
}

struct PkMetrics {
  double cmax_per_dose = 0.0;
  double tmax = 0.0;
  double auc_per_dose = 0.0;
};

inline PkMetrics compute_pk_metrics(const std::vector<double>& times, const std::vector<double>& conc, double dose) {
  if (times.size() < 2 || times.size() != conc.size())
    throw InsufficientData("PK metrics need at least two aligned time points");
  if (!(dose > 0.0)) throw ValidationError("PK metrics need a positive dose");
  const auto it = std::max_element(conc.begin(), conc.end());
  PkMetrics m;
  m.cmax_per_dose = *it / dose;
  m.tmax = times[std::size_t(it - conc.begin())];
  double auc = 0.0;
  for (std::size_t i = 1; i < times.size(); ++i) auc += 0.5 * (conc[i] + conc[i - 1]) * (times[i] - times[i - 1]);
  m.auc_per_dose = auc / dose;
  return m;
}

inline PkMetrics compute_pk_metrics(const IndividualRecord& r) {
  return compute_pk_metrics(r.times, r.concentrations, r.dose.amount);
}

// Percent coefficient of variation (sample sd) of each metric across a cohort.
inline PkMetrics cohort_cv(const std::vector<PkMetrics>& cohort) {
  if (cohort.size() < 2) throw InsufficientData("%CV needs at least two individuals");
  auto cv = [&](auto get) {
    double mean = 0.0;
    for (const auto& m : cohort) mean += get(m);
    mean /= double(cohort.size());
    double ss = 0.0;
    for (const auto& m : cohort) ss += (get(m) - mean) * (get(m) - mean);
    const double sd = std::sqrt(ss / double(cohort.size() - 1));
    return mean == 0.0 ? 0.0 : 100.0 * sd / mean;
  };
  return {cv([](const PkMetrics& m) { return m.cmax_per_dose; }), cv([](const PkMetrics& m) { return m.tmax; }),
          cv([](const PkMetrics& m) { return m.auc_per_dose; })};
}

}  // namespace funkflow::pk

namespace funkflow::pk {

// Fresh draw of one individual from the same study-level configuration that
// produced `study_seed`, observed at the given times. Used as the reference
// population in predictive checks.
inline std::vector<double> resimulate_at_times(const MetaStudyPrior& prior, std::uint64_t study_seed,
                                               const DoseSpec& dose, const std::vector<double>& times, Rng& rng) {
  Rng cfg_rng(study_seed);
  const auto cfg = sample_study_config(prior, cfg_rng);
  const auto grid = prior.grid();
  for (int attempt = 1;; ++attempt) {
    try {
      const auto kin = sample_subject_kinetics(cfg, rng);
      const auto traj = solve_pk_ode(sample_kinetics_path(kin, grid, rng), dose, grid);
      return apply_observation_noise(interpolate_linear(grid, traj.concentration, times), cfg.rel_ruv, rng);
    } catch (const NumericalError&) {
      if (attempt >= kMaxSimulationAttempts) throw;
    }
  }
}

}  // namespace funkflow::pk
