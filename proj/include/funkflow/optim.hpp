#pragma once

#include <cmath>

#include "funkflow/tensor.hpp"

namespace funkflow::optim {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  AdamWConfig config;
  ParamStore first_moment;
  ParamStore second_moment;
  long step = 0;

  OptimizerState() = default;
  OptimizerState(const ParamStore& params, AdamWConfig cfg)
      : config(cfg), first_moment(params.zeros_like()), second_moment(params.zeros_like()) {}
};

// Decoupled weight decay: theta <- theta * (1 - lr * wd), then the
// bias-corrected Adam update.
inline void adamw_step(OptimizerState& s, ParamStore& params, const ParamStore& grads, double lr) {
  params.check_layout(grads);
  params.check_layout(s.first_moment);
  ++s.step;
  const auto& c = s.config;
  const double bc1 = 1.0 - std::pow(c.beta1, double(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, double(s.step));
  auto m_it = s.first_moment.begin();
  auto v_it = s.second_moment.begin();
  auto g_it = grads.begin();
  for (auto p_it = params.begin(); p_it != params.end(); ++p_it, ++m_it, ++v_it, ++g_it) {
    auto& p = p_it->second.data;
    auto& m = m_it->second.data;
    auto& v = v_it->second.data;
    const auto& g = g_it->second.data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      p[k] *= 1.0 - lr * c.weight_decay;
      p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + c.eps);
    }
  }
}

inline double global_norm(const ParamStore& grads) {
  double sq = 0.0;
  for (const auto& [_, t] : grads)
    for (double v : t.data) sq += v * v;
  return std::sqrt(sq);
}

// Rescales in place when the global l2 norm exceeds max_norm. Returns the
// pre-clip norm.
inline double clip_global_norm(ParamStore& grads, double max_norm = 0.5) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [_, t] : grads)
      for (double& v : t.data) v *= scale;
  }
  return norm;
}

// Linear warm-up (epoch e gets base_lr * (e+1) / warmup), constant after.
inline double lr_schedule(long epoch, double base_lr = 1e-5, long warmup = 5) {
  if (warmup <= 0 || epoch >= warmup) return base_lr;
  return base_lr * double(epoch + 1) / double(warmup);
}

}  // namespace funkflow::optim
