#include "mcm/optim.hpp"

#include <cmath>

#include "mcm/error.hpp"

namespace mcm {

AdamWState AdamWState::init(const ParamSet& params, AdamWConfig config) {
  if (!(config.lr >= 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
      !(config.beta2 >= 0.0 && config.beta2 < 1.0) || !(config.eps > 0.0) || !(config.weight_decay >= 0.0)) {
    throw ConfigError("invalid AdamW hyperparameters");
  }
  return AdamWState{config, zeros_like(params), zeros_like(params), 0};
}

void adamw_step(ParamSet& params, const ParamSet& grads, AdamWState& state) {
  if (!params.same_layout(grads)) throw StructuralError("adamw_step: gradient layout differs from parameters");
  if (!params.same_layout(state.m) || !params.same_layout(state.v)) {
    throw StructuralError("adamw_step: optimizer state layout differs from parameters");
  }
  const auto& cfg = state.config;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;

  auto segs = params.mutable_segments();
  auto gsegs = grads.segments();
  auto msegs = state.m.mutable_segments();
  auto vsegs = state.v.mutable_segments();
  for (std::size_t s = 0; s < segs.size(); ++s) {
    auto p = segs[s].value.data();
    auto g = gsegs[s].value.data();
    auto m = msegs[s].value.data();
    auto v = vsegs[s].value.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] = p[i] * decay - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

void ema_update(ParamSet& target, const ParamSet& online, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("EMA rate must lie in [0, 1]");
  if (!target.same_layout(online)) throw StructuralError("ema_update: layouts differ");
  auto tsegs = target.mutable_segments();
  auto osegs = online.segments();
  for (std::size_t s = 0; s < tsegs.size(); ++s) {
    auto t = tsegs[s].value.data();
    auto o = osegs[s].value.data();
    if (rate == 1.0) continue;
    if (rate == 0.0) {
      std::copy(o.begin(), o.end(), t.begin());
      continue;
    }
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rate * t[i] + (1.0 - rate) * o[i];
  }
}

}  // namespace mcm
