#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "funkflow/flow_train.hpp"
#include "funkflow/pk_sim.hpp"

namespace funkflow::flow {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Central differences of the masked CFM loss against the analytic gradient
// for every parameter coordinate. Relative error is
// |fd - an| / max(|fd|, |an|, floor). Dropout is disabled.
inline GradCheckResult gradient_check(const ModelConfig& cfg, std::uint64_t seed, double step = 1e-4,
                                      double floor = 1e-6) {
  Rng rng(seed);
  FlowModel model(cfg, rng);
  const auto study = pk::simulate_study(pk::MetaStudyPrior{}, derive_seed(seed, {1}));
  std::vector<FlowExample> batch;
  std::vector<ExampleDraw> draws;
  for (std::size_t i = 0; i < std::min<std::size_t>(2, study.individuals.size()); ++i) {
    const auto& target = study.individuals[i];
    batch.push_back(make_example_with_split(without_subject(study, i), target, i == 0 ? 0 : 2, cfg, rng));
    draws.push_back({rng.uniform(), rng.engine()()});
  }
  const auto analytic = loss_and_grad(model, batch, draws, false);

  GradCheckResult res;
  for (auto& [name, t] : model.params()) {
    const auto& g = analytic.grads.at(name).data;
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double orig = t.data[k];
      t.data[k] = orig + step;
      const double up = loss_and_grad(model, batch, draws, false).loss;
      t.data[k] = orig - step;
      const double dn = loss_and_grad(model, batch, draws, false).loss;
      t.data[k] = orig;
      const double fd = (up - dn) / (2.0 * step);
      const double rel = std::abs(fd - g[k]) / std::max({std::abs(fd), std::abs(g[k]), floor});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = name;
        res.worst_index = k;
      }
    }
  }
  return res;
}

}  // namespace funkflow::flow
