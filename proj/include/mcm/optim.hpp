#pragma once

#include <cstdint>

#include "mcm/params.hpp"

namespace mcm {

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  AdamWConfig config;
  ParamSet m;
  ParamSet v;
  std::uint64_t t = 0;

  static AdamWState init(const ParamSet& params, AdamWConfig config);
};

/// One AdamW step with decoupled weight decay (p <- p * (1 - lr * wd) before the
/// moment update). Updates `params` and `state` in place.
void adamw_step(ParamSet& params, const ParamSet& grads, AdamWState& state);

/// target <- rate * target + (1 - rate) * online, element-wise.
void ema_update(ParamSet& target, const ParamSet& online, double rate);

}  // namespace mcm
