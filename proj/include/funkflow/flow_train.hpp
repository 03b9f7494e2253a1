#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "funkflow/errors.hpp"
#include "funkflow/flow_model.hpp"
#include "funkflow/gp.hpp"
#include "funkflow/optim.hpp"
#include "funkflow/parallel.hpp"
#include "funkflow/pk_sim.hpp"
#include "funkflow/random.hpp"

namespace funkflow::flow {

// One training tuple: context study, target grid, source z0 and data z1.
// z0 and z1 agree on the first prefix_len slots.
struct FlowExample {
  StudyBatch context;
  TargetState target;  // target.z is unused until a path sample is drawn
  std::vector<double> z0, z1;

  std::size_t prefix_len() const { return target.prefix_len; }
};

inline pk::Study without_subject(const pk::Study& study, std::size_t held_out) {
  pk::Study ctx;
  ctx.study_id = study.study_id;
  ctx.seed = study.seed;
  for (std::size_t i = 0; i < study.individuals.size(); ++i)
    if (i != held_out) ctx.individuals.push_back(study.individuals[i]);
  return ctx;
}

// Builds an example from `context` and a held-out target record with a
// prefix of `prefix_len` observed points. The future source is drawn from
// the GP reference (prior when prefix_len == 0, posterior otherwise).
inline FlowExample make_example_with_split(const pk::Study& context, const pk::IndividualRecord& target,
                                           std::size_t prefix_len, const ModelConfig& cfg, Rng& rng) {
  if (target.times.empty()) throw ValidationError("target individual has no observations");
  if (prefix_len > target.times.size()) throw ValidationError("prefix longer than target record");
  FlowExample ex;
  ex.context = normalize_study(context);
  const auto& sc = ex.context.scales;
  const std::size_t T = target.times.size();
  ex.target.times.resize(T);
  ex.z1.resize(T);
  for (std::size_t j = 0; j < T; ++j) {
    ex.target.times[j] = sc.norm_time(target.times[j]);
    ex.z1[j] = sc.norm_conc(target.concentrations[j], target.dose.amount);
  }
  ex.target.prefix_len = prefix_len;
  ex.target.dose = sc.norm_dose(target.dose.amount);
  ex.target.route = target.dose.route;

  const std::vector<double> future_times(ex.target.times.begin() + long(prefix_len), ex.target.times.end());
  std::optional<gp::Prefix> prefix;
  if (prefix_len > 0)
    prefix = gp::Prefix{{ex.target.times.begin(), ex.target.times.begin() + long(prefix_len)},
                        {ex.z1.begin(), ex.z1.begin() + long(prefix_len)}};
  const auto x_f = gp::reference_sample(prefix, future_times, cfg.kernel, cfg.jitter, rng);
  ex.z0 = ex.z1;
  std::copy(x_f.begin(), x_f.end(), ex.z0.begin() + long(prefix_len));
  ex.target.z = ex.z0;
  return ex;
}

// Leave-one-subject-out example with split p ~ U{0, ..., |tau|-1}.
inline FlowExample make_training_example(const pk::Study& study, std::size_t target_index, const ModelConfig& cfg,
                                         Rng& rng) {
  if (study.individuals.size() < 2) throw ValidationError("training study needs at least two individuals");
  if (target_index >= study.individuals.size()) throw ValidationError("target index out of range");
  const auto& target = study.individuals[target_index];
  if (target.times.empty()) throw ValidationError("target individual has no observations");
  const auto p = std::size_t(rng.uniform_int(0, long(target.times.size()) - 1));
  return make_example_with_split(without_subject(study, target_index), target, p, cfg, rng);
}

// z_t = t z1 + (1 - t) z0 + sigma_min eps on future slots; past slots are
// the observed prefix exactly.
inline std::vector<double> conditional_path_sample(const std::vector<double>& z0, const std::vector<double>& z1,
                                                   double t, double sigma_min, const std::vector<double>& prefix_mask,
                                                   Rng& rng) {
  if (z0.size() != z1.size() || z0.size() != prefix_mask.size())
    throw ValidationError("conditional path: length mismatch");
  std::vector<double> zt(z0.size());
  for (std::size_t j = 0; j < z0.size(); ++j) {
    if (prefix_mask[j] == 0.0) {
      zt[j] = z1[j];
      continue;
    }
    const double eps = sigma_min > 0.0 ? rng.normal() : 0.0;
    zt[j] = t * z1[j] + (1.0 - t) * z0[j] + sigma_min * eps;
  }
  return zt;
}

struct LossValue {
  double loss = 0.0;
  std::size_t future_count = 0;  // normalizer; 0 means the example carries no weight
};

// Mean over valid future slots of (v - (y_F - x_F))^2.
inline LossValue cfm_loss(const std::vector<double>& v_pred, const std::vector<double>& z0,
                          const std::vector<double>& z1, const std::vector<double>& prefix_mask,
                          std::vector<double>* grad = nullptr) {
  const std::size_t T = v_pred.size();
  if (z0.size() != T || z1.size() != T || prefix_mask.size() != T) throw ValidationError("cfm loss: length mismatch");
  LossValue out;
  for (double m : prefix_mask) out.future_count += m != 0.0;
  if (grad) grad->assign(T, 0.0);
  if (out.future_count == 0) return out;
  const double n = double(out.future_count);
  for (std::size_t j = 0; j < T; ++j) {
    if (prefix_mask[j] == 0.0) continue;
    const double r = v_pred[j] - (z1[j] - z0[j]);
    out.loss += r * r / n;
    if (grad) (*grad)[j] = 2.0 * r / n;
  }
  return out;
}

// Per-example randomness consumed inside loss_and_grad.
struct ExampleDraw {
  double t = 0.0;
  std::uint64_t noise_seed = 0;
};

struct LossAndGrad {
  double loss = 0.0;
  ParamStore grads;
};

// Masked CFM loss of a batch and its exact gradient. Examples without future
// slots get zero weight; the rest are averaged. Dropout is active when
// `training` is set.
inline LossAndGrad loss_and_grad(const FlowModel& model, const std::vector<FlowExample>& batch,
                                 const std::vector<ExampleDraw>& draws, bool training = true) {
  if (draws.size() != batch.size()) throw ValidationError("loss_and_grad: one draw per example required");
  const std::size_t B = batch.size();
  std::vector<ParamStore> per(B);
  std::vector<LossValue> losses(B);
  parallel_for(B, [&](std::size_t i) {
    const auto& ex = batch[i];
    Rng rng(draws[i].noise_seed);
    TargetState st = ex.target;
    const auto mask = st.prefix_mask();
    st.z = conditional_path_sample(ex.z0, ex.z1, draws[i].t, model.config().sigma_min, mask, rng);
    Rng* drop = training && model.config().dropout > 0.0 ? &rng : nullptr;
    FlowModel::EncoderCache ec;
    FlowModel::DecoderCache dc;
    const Mat h = model.encode(ex.context, draws[i].t, drop, &ec);
    const Eigen::VectorXd raw = model.decode(st, draws[i].t, h, ex.context, drop, &dc);
    std::vector<double> v(raw.size());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = raw(Eigen::Index(j)) * mask[j];
    std::vector<double> g;
    losses[i] = cfm_loss(v, ex.z0, ex.z1, mask, &g);
    if (!std::isfinite(losses[i].loss)) throw NonFiniteLoss("cfm loss");
    per[i] = model.params().zeros_like();
    if (losses[i].future_count == 0) return;
    Eigen::VectorXd dout(raw.size());
    for (std::size_t j = 0; j < g.size(); ++j) dout(Eigen::Index(j)) = g[j] * mask[j];
    model.backward(ex.context, ec, dc, dout, per[i]);
  });
  LossAndGrad out;
  out.grads = model.params().zeros_like();
  std::size_t weighted = 0;
  for (std::size_t i = 0; i < B; ++i) weighted += losses[i].future_count > 0;
  if (weighted == 0) return out;
  // Ordered reduction keeps results independent of scheduling.
  for (std::size_t i = 0; i < B; ++i) {
    if (losses[i].future_count == 0) continue;
    out.loss += losses[i].loss / double(weighted);
    out.grads.accumulate(per[i], 1.0 / double(weighted));
  }
  for (const auto& [name, t] : out.grads)
    for (double v : t.data)
      if (!std::isfinite(v)) throw NonFiniteLoss("gradient of " + name);
  return out;
}

struct TrainConfig {
  long epochs = 300;
  std::size_t batch_size = 64;
  double base_lr = 1e-5;
  long warmup_epochs = 5;
  double weight_decay = 0.01;
  double clip_norm = 0.5;
  std::uint64_t seed = 0;
  long checkpoint_every = 10;
};

struct EpochStats {
  long epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  ParamStore best_params;
  double best_loss = std::numeric_limits<double>::infinity();
};

// Called with (model, epoch, is_best) at every checkpoint event.
using CheckpointFn = std::function<void(const FlowModel&, long, bool)>;
using ProgressFn = std::function<void(const EpochStats&)>;

// Epochs are passes over `corpus`. Each visit draws a fresh held-out target,
// split, reference sample, flow time and path noise from a stream keyed by
// (seed, epoch, study index), so results do not depend on worker count.
inline TrainResult train(FlowModel& model, const std::vector<pk::Study>& corpus, const TrainConfig& cfg,
                         const CheckpointFn& checkpoint = {}, const ProgressFn& progress = {}) {
  if (corpus.empty()) throw ValidationError("training corpus is empty");
  if (cfg.batch_size == 0 || cfg.epochs < 0) throw ValidationError("invalid training configuration");
  optim::OptimizerState opt(model.params(), {0.9, 0.999, 1e-8, cfg.weight_decay});
  TrainResult result;
  result.best_params = model.params();
  const auto& mcfg = model.config();

  for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = optim::lr_schedule(epoch, cfg.base_lr, cfg.warmup_epochs);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(cfg.seed, {0x5u, std::uint64_t(epoch)}));
    std::shuffle(order.begin(), order.end(), shuffle.engine());

    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t B = std::min(cfg.batch_size, order.size() - start);
      std::vector<FlowExample> batch(B);
      std::vector<ExampleDraw> draws(B);
      parallel_for(B, [&](std::size_t i) {
        const std::size_t s = order[start + i];
        Rng rng(derive_seed(cfg.seed, {0x7u, std::uint64_t(epoch), std::uint64_t(s)}));
        const auto target = std::size_t(rng.uniform_int(0, long(corpus[s].individuals.size()) - 1));
        batch[i] = make_training_example(corpus[s], target, mcfg, rng);
        draws[i].t = rng.uniform();
        draws[i].noise_seed = rng.engine()();
      });
      const ParamStore last_good = model.params();
      LossAndGrad lg;
      try {
        lg = loss_and_grad(model, batch, draws, true);
      } catch (const NonFiniteLoss&) {
        model.params() = last_good;
        throw;
      }
      optim::clip_global_norm(lg.grads, cfg.clip_norm);
      optim::adamw_step(opt, model.params(), lg.grads, lr);
      loss_sum += lg.loss;
      ++steps;
    }
    EpochStats st{epoch + 1, loss_sum / double(std::max<std::size_t>(1, steps)), lr};
    result.history.push_back(st);
    if (progress) progress(st);
    if (st.mean_loss < result.best_loss) {
      result.best_loss = st.mean_loss;
      result.best_params = model.params();
      if (checkpoint) checkpoint(model, st.epoch, true);
    }
    if (checkpoint && cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0) checkpoint(model, st.epoch, false);
  }
  return result;
}

}  // namespace funkflow::flow
