#if __has_include(<CLI11.hpp>)
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif

#include <cstdio>
#include <iostream>
#include <sstream>

#include "funkflow/eval.hpp"
#include "funkflow/flow_infer.hpp"
#include "funkflow/flow_train.hpp"
#include "funkflow/gradcheck.hpp"
#include "funkflow/io.hpp"
#include "funkflow/pipeline.hpp"

using namespace funkflow;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json summary_json(const flow::PredictiveSummary& s) {
  json q = json::object();
  for (std::size_t i = 0; i < s.levels.size(); ++i) {
    std::ostringstream key;
    key << s.levels[i];
    q[key.str()] = s.quantiles[i];
  }
  return {{"times", s.times}, {"mean", s.mean}, {"quantiles", q}};
}

void write_json(const std::string& out, const json& j) { io::write_text(out, j.dump(1) + "\n"); }

flow::FlowModel load_model(const std::string& dir) {
  auto ck = io::load_checkpoint(dir);
  return flow::FlowModel(ck.config, std::move(ck.params));
}

const pk::IndividualRecord& find_subject(const pk::Study& s, const std::string& id) {
  for (const auto& ind : s.individuals)
    if (ind.id == id) return ind;
  throw ValidationError("subject " + id + " not found in study " + s.study_id);
}

std::size_t subject_index(const pk::Study& s, const std::string& id) {
  for (std::size_t i = 0; i < s.individuals.size(); ++i)
    if (s.individuals[i].id == id) return i;
  throw ValidationError("subject " + id + " not found in study " + s.study_id);
}

int cmd_simulate(const std::string& config, std::size_t n, std::uint64_t seed, const std::string& out) {
  const auto prior = config.empty() ? pk::MetaStudyPrior{} : io::prior_from_json(io::read_json(config));
  prior.validate();
  const auto studies = pipeline::simulate_corpus(prior, seed, pipeline::kTrainStudies, n, "study-");
  fs::create_directories(out);
  char name[32];
  for (std::size_t i = 0; i < studies.size(); ++i) {
    std::snprintf(name, sizeof name, "study-%06zu.json", i);
    io::save_study(fs::path(out) / name, studies[i]);
  }
  return 0;
}

int cmd_train(const std::string& data, const std::string& config, const std::string& out, std::uint64_t seed) {
  const auto corpus = io::load_studies(data);
  json cfg = config.empty() ? json::object() : io::read_json(config);
  const auto mcfg = io::model_config_from_json(cfg.value("model", json::object()),
                                               pipeline::ToyOptions::toy_model());
  auto tcfg = io::train_config_from_json(cfg.value("train", json::object()), pipeline::ToyOptions::toy_train());
  tcfg.seed = seed;
  Rng init(derive_seed(seed, {pipeline::kModelInit}));
  flow::FlowModel model(mcfg, init);
  auto save = [&](const fs::path& dir, const flow::FlowModel& m, long epoch) {
    io::save_checkpoint(dir, {mcfg, m.params(), {{"epoch", epoch}, {"train", io::train_config_to_json(tcfg)}}, seed});
  };
  const auto result = flow::train(
      model, corpus, tcfg,
      [&](const flow::FlowModel& m, long epoch, bool best) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch-%04ld", epoch);
        save(fs::path(out) / (best ? "best" : name), m, epoch);
      },
      [](const flow::EpochStats& e) {
        std::fprintf(stderr, "epoch %ld loss %.6g lr %.3g\n", e.epoch, e.mean_loss, e.lr);
      });
  save(out, model, tcfg.epochs);
  io::write_text(fs::path(out) / "loss_history.csv", io::loss_history_csv(result.history));
  return 0;
}

int cmd_synthesize(const std::string& ckpt, const std::string& study_path, std::size_t n,
                   std::vector<double> times, std::uint64_t seed, const std::string& out) {
  const auto model = load_model(ckpt);
  const auto study = io::load_study(study_path);
  if (times.empty()) {
    double tmax = 0.0;
    for (const auto& ind : study.individuals) tmax = std::max(tmax, ind.times.back());
    for (int k = 1; k <= 50; ++k) times.push_back(tmax * k / 50.0);
  }
  Rng rng(seed);
  const auto samples = flow::synthesize_population(model, study, n, times, rng);
  write_json(out, {{"study_id", study.study_id},
                   {"times", times},
                   {"samples", samples},
                   {"summary", summary_json(flow::summarize(times, samples))}});
  return 0;
}

int cmd_forecast(const std::string& ckpt, const std::string& study_path, const std::string& subject,
                 std::size_t prefix_len, std::size_t n, std::uint64_t seed, const std::string& out) {
  const auto model = load_model(ckpt);
  const auto study = io::load_study(study_path);
  const auto& ind = find_subject(study, subject);
  if (prefix_len == 0 || prefix_len >= ind.times.size())
    throw ValidationError("prefix length must be in [1, " + std::to_string(ind.times.size() - 1) + "] for subject " +
                          subject);
  const gp::Prefix prefix{{ind.times.begin(), ind.times.begin() + long(prefix_len)},
                          {ind.concentrations.begin(), ind.concentrations.begin() + long(prefix_len)}};
  const std::vector<double> future(ind.times.begin() + long(prefix_len), ind.times.end());
  Rng rng(seed);
  const auto f = flow::forecast_individual(model, flow::without_subject(study, subject_index(study, subject)), prefix,
                                           ind.dose, future, n, rng);
  const std::vector<double> observed(ind.concentrations.begin() + long(prefix_len), ind.concentrations.end());
  const auto fut = eval::future_part(f);
  write_json(out, {{"study_id", study.study_id},
                   {"subject_id", subject},
                   {"prefix_len", prefix_len},
                   {"times", f.times},
                   {"samples", f.samples},
                   {"summary", summary_json(f.summary)},
                   {"log_rmse", eval::log_rmse(fut.mean, observed)}});
  return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& data, std::size_t prefix_len,
                 const std::vector<std::string>& metrics, std::size_t n, std::size_t vpc_reps, std::uint64_t seed,
                 const std::string& out) {
  const auto model = load_model(ckpt);
  const auto studies = io::load_studies(data);
  json report{{"prefix_len", prefix_len}, {"num_samples", n}, {"seed", seed}};
  for (const auto& m : metrics) {
    if (m == "loo") {
      const auto r = eval::loo_forecast_eval(eval::model_forecaster(model, n), studies, prefix_len,
                                             derive_seed(seed, {pipeline::kEvalTrained}));
      if (r.skipped > 0) std::fprintf(stderr, "warning: %zu subjects skipped (too few observations)\n", r.skipped);
      report["loo"] = pipeline::loo_json(r);
    } else if (m == "baseline") {
      flow::InferenceOptions null_opt;
      null_opt.zero_field = true;
      const auto r = eval::loo_forecast_eval(eval::model_forecaster(model, n, null_opt), studies, prefix_len,
                                             derive_seed(seed, {pipeline::kEvalBaseline}));
      report["baseline"] = pipeline::loo_json(r);
    } else if (m == "vpc") {
      Rng rng(derive_seed(seed, {pipeline::kVpc}));
      json tables = json::array();
      for (const auto& s : studies) {
        auto t = pipeline::vpc_json(eval::vpc(eval::model_population_simulator(model), s, vpc_reps, rng));
        t["study_id"] = s.study_id;
        tables.push_back(t);
      }
      report["vpc"] = tables;
    } else {
      throw ValidationError("unknown metric '" + m + "' (expected loo, baseline or vpc)");
    }
  }
  write_json(out, report);
  return 0;
}

int cmd_pkmetrics(const std::string& data, const std::string& out) {
  const auto studies = io::load_studies(data);
  json arr = json::array();
  for (const auto& s : studies) {
    json subjects = json::array();
    std::vector<pk::PkMetrics> cohort;
    for (const auto& ind : s.individuals) {
      const auto m = pk::compute_pk_metrics(ind);
      cohort.push_back(m);
      subjects.push_back({{"id", ind.id}, {"cmax_per_dose", m.cmax_per_dose}, {"tmax", m.tmax},
                          {"auc_per_dose", m.auc_per_dose}});
    }
    json entry{{"study_id", s.study_id}, {"subjects", subjects}};
    if (cohort.size() >= 2) {
      const auto cv = pk::cohort_cv(cohort);
      entry["cv_percent"] = {{"cmax_per_dose", cv.cmax_per_dose}, {"tmax", cv.tmax}, {"auc_per_dose", cv.auc_per_dose}};
    }
    arr.push_back(entry);
  }
  write_json(out, {{"studies", arr}});
  return 0;
}

int cmd_gradcheck(const std::string& config, double tolerance, std::uint64_t seed) {
  const auto cfg = io::model_config_from_json(config.empty() ? json::object() : io::read_json(config),
                                              flow::ModelConfig::gradcheck());
  const auto r = flow::gradient_check(cfg, seed);
  std::printf("checked %zu coordinates; max relative error %.3e at %s[%zu]\n", r.checked, r.max_rel_error,
              r.worst_param.c_str(), r.worst_index);
  if (r.max_rel_error > tolerance) {
    std::fprintf(stderr, "numerical-error: max relative error %.3e exceeds tolerance %.3e\n", r.max_rel_error,
                 tolerance);
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Functional flow matching for pharmacokinetic studies"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  std::string config, out, data, ckpt, study, subject;
  std::size_t num = 0, prefix = 4, samples = 64, vpc_reps = 100;
  std::vector<double> times;
  std::vector<std::string> metrics{"loo"};
  double tolerance = 1e-4;

  auto* sim = app.add_subcommand("simulate", "Draw studies from the meta-study prior");
  sim->add_option("--config", config, "prior JSON (defaults apply to missing keys)");
  sim->add_option("--num-studies", num, "number of studies")->required();
  sim->add_option("--seed", seed, "master seed");
  sim->add_option("--out", out, "output directory")->required();

  auto* trn = app.add_subcommand("train", "Train a flow model on a study corpus");
  trn->add_option("--data", data, "study file or directory")->required();
  trn->add_option("--config", config, "JSON with optional \"model\" and \"train\" objects");
  trn->add_option("--out", out, "checkpoint directory")->required();
  trn->add_option("--seed", seed, "master seed");

  auto* syn = app.add_subcommand("synthesize", "Generate a virtual population for a study");
  syn->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  syn->add_option("--study", study, "context study file")->required();
  syn->add_option("--num-samples", samples, "number of virtual subjects");
  syn->add_option("--times", times, "comma-separated query times")->delimiter(',');
  syn->add_option("--seed", seed, "sampling seed");
  syn->add_option("--out", out, "output JSON")->required();

  auto* fc = app.add_subcommand("forecast", "Forecast one subject from an observed prefix");
  fc->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  fc->add_option("--study", study, "study file containing the subject")->required();
  fc->add_option("--subject", subject, "subject id")->required();
  fc->add_option("--prefix", prefix, "number of observed samples to condition on");
  fc->add_option("--num-samples", samples, "predictive samples");
  fc->add_option("--seed", seed, "sampling seed");
  fc->add_option("--out", out, "output JSON")->required();

  auto* ev = app.add_subcommand("evaluate", "Leave-one-out forecasting and predictive checks");
  ev->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  ev->add_option("--data", data, "study file or directory")->required();
  ev->add_option("--prefix-len", prefix, "observed samples per held-out subject");
  ev->add_option("--metrics", metrics, "comma-separated subset of loo,baseline,vpc")->delimiter(',');
  ev->add_option("--num-samples", samples, "predictive samples");
  ev->add_option("--vpc-replicates", vpc_reps, "VPC replicate populations");
  ev->add_option("--seed", seed, "evaluation seed");
  ev->add_option("--out", out, "report JSON")->required();

  auto* pkm = app.add_subcommand("pkmetrics", "Cmax/dose, Tmax, AUC/dose and cohort %CV");
  pkm->add_option("--data", data, "study file or directory")->required();
  pkm->add_option("--out", out, "output JSON")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the training gradient");
  gc->add_option("--config", config, "model config JSON (defaults to the gradient-check model)");
  gc->add_option("--tolerance", tolerance, "maximum relative error");
  gc->add_option("--seed", seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage-error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (*sim) return cmd_simulate(config, num, seed, out);
    if (*trn) return cmd_train(data, config, out, seed);
    if (*syn) return cmd_synthesize(ckpt, study, samples, times, seed, out);
    if (*fc) return cmd_forecast(ckpt, study, subject, prefix, samples, seed, out);
    if (*ev) return cmd_evaluate(ckpt, data, prefix, metrics, samples, vpc_reps, seed, out);
    if (*pkm) return cmd_pkmetrics(data, out);
    if (*gc) return cmd_gradcheck(config, tolerance, seed);
  } catch (const Error& e) {
    std::cerr << e.prefix() << ": " << e.what() << "\n";
    return e.exit_code();
  } catch (const json::exception& e) {
    std::cerr << "validation-error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
