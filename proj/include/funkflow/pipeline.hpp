#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "funkflow/eval.hpp"
#include "funkflow/flow_infer.hpp"
#include "funkflow/flow_model.hpp"
#include "funkflow/flow_train.hpp"
#include "funkflow/io.hpp"
#include "funkflow/parallel.hpp"
#include "funkflow/pk_sim.hpp"

namespace funkflow::pipeline {

using nlohmann::json;

// Stream tags for derive_seed; each consumer owns one.
enum : std::uint64_t { kTrainStudies = 1, kTestStudies = 2, kModelInit = 3, kEvalTrained = 4, kEvalBaseline = 5, kVpc = 6 };

struct ToyOptions {
  std::uint64_t seed = 0;
  std::size_t train_studies = 2000;
  std::size_t test_studies = 20;
  std::size_t prefix_len = 4;
  std::size_t forecast_samples = 64;
  std::size_t vpc_studies = 2;
  std::size_t vpc_replicates = 100;
  std::size_t vpc_bins = 8;
  pk::MetaStudyPrior prior;
  flow::ModelConfig model = toy_model();
  flow::TrainConfig train = toy_train();

  static flow::ModelConfig toy_model() {
    auto c = flow::ModelConfig::miniature();
    c.kernel = {1.0, 0.1};
    return c;
  }
  static flow::TrainConfig toy_train() {
    flow::TrainConfig c;
    c.epochs = 30;
    c.batch_size = 32;
    c.base_lr = 1e-3;
    return c;
  }
  // Reduced run for determinism checks and golden hashes.
  static ToyOptions smoke(std::uint64_t seed) {
    ToyOptions o;
    o.seed = seed;
    o.train_studies = 64;
    o.test_studies = 2;
    o.forecast_samples = 8;
    o.vpc_studies = 1;
    o.vpc_replicates = 100;
    o.model.hidden = 8;
    o.model.encoder_depth = o.model.decoder_depth = 1;
    o.model.heads = 2;
    o.train.epochs = 3;
    o.train.batch_size = 16;
    return o;
  }
};

inline std::vector<pk::Study> simulate_corpus(const pk::MetaStudyPrior& prior, std::uint64_t seed, std::uint64_t tag,
                                              std::size_t n, const std::string& prefix) {
  std::vector<pk::Study> out(n);
  parallel_for(n, [&](std::size_t i) {
    out[i] = pk::simulate_study(prior, derive_seed(seed, {tag, std::uint64_t(i)}), prefix + std::to_string(i));
  });
  return out;
}

inline json coverage_json(const eval::Coverage& c) {
  return {{"c50", c.c50}, {"c80", c.c80}, {"c95", c.c95}, {"n", c.n}};
}

inline json vpc_json(const eval::VpcTable& t) {
  json bins = json::array();
  for (const auto& b : t.bins)
    bins.push_back({{"t_lo", b.t_lo},
                    {"t_hi", b.t_hi},
                    {"n_obs", b.n_obs},
                    {"simulated", b.simulated},
                    {"observed", b.observed},
                    {"fraction_inside", b.fraction_inside}});
  return {{"percentiles", t.percentiles}, {"bins", bins}, {"band_coverage", t.band_coverage}};
}

inline bool vpc_monotone(const eval::VpcTable& t) {
  for (const auto& b : t.bins)
    for (std::size_t k = 1; k < b.simulated.size(); ++k)
      if (b.simulated[k] < b.simulated[k - 1]) return false;
  return true;
}

inline json loo_json(const eval::LooReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"study_id", row.study_id},
                    {"subject_id", row.subject_id},
                    {"log_rmse", row.log_rmse},
                    {"n_future", row.n_future},
                    {"coverage", coverage_json(row.coverage)}});
  json studies = json::array();
  for (const auto& s : r.per_study)
    studies.push_back({{"study_id", s.study_id}, {"mean", s.mean}, {"sd", s.sd}, {"n", s.n}});
  return {{"rows", rows}, {"per_study", studies}, {"skipped", r.skipped}, {"pooled_coverage", coverage_json(r.pooled_coverage())}};
}

struct ToyResult {
  json report;  // deterministic content only
  double runtime_seconds = 0.0;
};

// simulate -> train -> leave-one-out evaluation against the zero-field
// GP-posterior baseline -> coverage and VPC.
inline ToyResult run_toy_pipeline(const ToyOptions& o, const flow::ProgressFn& progress = {}) {
  const auto start = std::chrono::steady_clock::now();
  const auto train = simulate_corpus(o.prior, o.seed, kTrainStudies, o.train_studies, "train-");
  const auto test = simulate_corpus(o.prior, o.seed, kTestStudies, o.test_studies, "test-");

  Rng init(derive_seed(o.seed, {kModelInit}));
  flow::FlowModel model(o.model, init);
  auto tcfg = o.train;
  tcfg.seed = o.seed;
  const auto tr = flow::train(model, train, tcfg, {}, progress);

  const auto trained = eval::loo_forecast_eval(eval::model_forecaster(model, o.forecast_samples), test, o.prefix_len,
                                               derive_seed(o.seed, {kEvalTrained}));
  flow::InferenceOptions null_opt;
  null_opt.zero_field = true;
  const auto baseline = eval::loo_forecast_eval(eval::model_forecaster(model, o.forecast_samples, null_opt), test,
                                                o.prefix_len, derive_seed(o.seed, {kEvalBaseline}));
  std::size_t wins = 0;
  for (std::size_t i = 0; i < trained.rows.size(); ++i) wins += trained.rows[i].log_rmse <= baseline.rows[i].log_rmse;
  const double win_fraction = trained.rows.empty() ? 0.0 : double(wins) / double(trained.rows.size());

  json vpcs = json::array();
  bool monotone = true;
  Rng vrng(derive_seed(o.seed, {kVpc}));
  const auto sim = eval::model_population_simulator(model);
  for (std::size_t s = 0; s < std::min(o.vpc_studies, test.size()); ++s) {
    const auto table = eval::vpc(sim, test[s], o.vpc_replicates, vrng, {10, 50, 90}, o.vpc_bins);
    monotone = monotone && vpc_monotone(table);
    auto j = vpc_json(table);
    j["study_id"] = test[s].study_id;
    vpcs.push_back(j);
  }

  json history = json::array();
  for (const auto& e : tr.history) history.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"lr", e.lr}});
  double min_loss = tr.history.empty() ? 0.0 : tr.history.front().mean_loss;
  for (const auto& e : tr.history) min_loss = std::min(min_loss, e.mean_loss);
  const double first = tr.history.empty() ? 0.0 : tr.history.front().mean_loss;
  const double drop = first > 0.0 ? 1.0 - min_loss / first : 0.0;

  ToyResult out;
  out.report = {
      {"seed", o.seed},
      {"config",
       {{"train_studies", o.train_studies},
        {"test_studies", o.test_studies},
        {"prefix_len", o.prefix_len},
        {"forecast_samples", o.forecast_samples},
        {"vpc_replicates", o.vpc_replicates},
        {"model", io::model_config_to_json(o.model)},
        {"train", io::train_config_to_json(tcfg)},
        {"prior", io::prior_to_json(o.prior)}}},
      {"loss_history", history},
      {"loss_drop_fraction", drop},
      {"trained", loo_json(trained)},
      {"baseline", loo_json(baseline)},
      {"fraction_beating_baseline", win_fraction},
      {"coverage80", trained.pooled_coverage().c80},
      {"vpc", vpcs},
      {"vpc_monotone", monotone},
  };
  out.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace funkflow::pipeline
