// Simulates a study, fits (or loads) a flow model, then prints a synthesized
// virtual population and a prefix-conditioned forecast next to the data.
#include <cstdio>
#include <string>

#include "funkflow/eval.hpp"
#include "funkflow/flow_infer.hpp"
#include "funkflow/io.hpp"
#include "funkflow/pipeline.hpp"

using namespace funkflow;

int main(int argc, char** argv) {
  try {
    flow::FlowModel model;
    if (argc > 1) {
      auto ck = io::load_checkpoint(argv[1]);
      model = flow::FlowModel(ck.config, std::move(ck.params));
      std::printf("loaded checkpoint %s\n", argv[1]);
    } else {
      auto cfg = pipeline::ToyOptions::toy_model();
      cfg.hidden = 16;
      Rng init(1);
      model = flow::FlowModel(cfg, init);
      auto tcfg = pipeline::ToyOptions::toy_train();
      tcfg.epochs = 8;
      const auto corpus = pipeline::simulate_corpus({}, 1, pipeline::kTrainStudies, 300, "train-");
      std::printf("training a small model on %zu simulated studies (pass a checkpoint dir to skip)\n", corpus.size());
      flow::train(model, corpus, tcfg, {}, [](const flow::EpochStats& e) {
        std::printf("  epoch %2ld  loss %.4f\n", e.epoch, e.mean_loss);
      });
    }

    const auto study = pk::simulate_study({}, 2024, "demo");
    std::printf("\nstudy %s: %zu subjects\n", study.study_id.c_str(), study.individuals.size());
    for (const auto& ind : study.individuals) {
      const auto m = pk::compute_pk_metrics(ind);
      std::printf("  %-10s %-4s dose %7.2f  Cmax/dose %.4g  Tmax %5.2f h  AUC/dose %.4g\n", ind.id.c_str(),
                  pk::to_string(ind.dose.route).c_str(), ind.dose.amount, m.cmax_per_dose, m.tmax, m.auc_per_dose);
    }

    const auto& ref = study.individuals[0];
    const std::vector<double> grid{0.5, 1, 2, 4, 8, 12, 24};
    Rng rng(7);
    const auto pop = flow::synthesize_population(model, study, 200, grid, rng, ref.dose);
    const auto s = flow::summarize(grid, pop);
    std::printf("\nvirtual population at dose %.2f (%s), 200 subjects\n", ref.dose.amount,
                pk::to_string(ref.dose.route).c_str());
    std::printf("  %6s %10s %10s %10s\n", "t [h]", "p10", "median", "p90");
    for (std::size_t j = 0; j < grid.size(); ++j)
      std::printf("  %6.1f %10.4g %10.4g %10.4g\n", grid[j], s.quantile(0.10)[j], s.quantile(0.50)[j],
                  s.quantile(0.90)[j]);

    const std::size_t p = std::min<std::size_t>(4, ref.times.size() - 1);
    const gp::Prefix prefix{{ref.times.begin(), ref.times.begin() + long(p)},
                            {ref.concentrations.begin(), ref.concentrations.begin() + long(p)}};
    const std::vector<double> fut(ref.times.begin() + long(p), ref.times.end());
    const auto f = flow::forecast_individual(model, flow::without_subject(study, 0), prefix, ref.dose, fut, 128, rng);
    std::printf("\nforecast for %s from its first %zu samples\n", ref.id.c_str(), p);
    std::printf("  %6s %10s %10s %10s %10s\n", "t [h]", "observed", "mean", "p10", "p90");
    for (std::size_t j = 0; j < f.times.size(); ++j)
      std::printf("  %6.2f %10.4g %10.4g %10.4g %10.4g%s\n", f.times[j], ref.concentrations[j], f.summary.mean[j],
                  f.summary.quantile(0.10)[j], f.summary.quantile(0.90)[j], j < p ? "  (prefix)" : "");
    const std::vector<double> obs(ref.concentrations.begin() + long(p), ref.concentrations.end());
    std::printf("  log-RMSE of the forecast mean: %.3f\n", eval::log_rmse(eval::future_part(f).mean, obs));
  } catch (const Error& e) {
    std::fprintf(stderr, "%s: %s\n", e.prefix(), e.what());
    return e.exit_code();
  }
  return 0;
}
