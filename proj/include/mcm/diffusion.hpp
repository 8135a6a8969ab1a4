#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mcm/grid.hpp"
#include "mcm/tensor.hpp"

namespace mcm {

/// Discrete variance-preserving schedule. alpha_bar[0] = 1 is the clean end;
/// alpha_bar[n] = prod_{i<n} (1 - beta[i]).
struct NoiseSchedule {
  int num_steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  double sqrt_alpha_bar(int n) const;
  double sqrt_one_minus_alpha_bar(int n) const;
  void check_index(int n) const;
};

/// Linear beta ramp from beta_min to beta_max over `num_steps` entries.
NoiseSchedule make_schedule(int num_steps = 1000, double beta_min = 1e-4, double beta_max = 2e-2);

/// Epsilon-predicting network evaluated on a batch. Implementations must be
/// safe to call concurrently.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual GridShape grid_shape() const = 0;
  /// x: [B, C, H, W]; n and c hold one entry per batch row.
  virtual Tensor predict_eps(const Tensor& x, std::span<const int> n, std::span<const CondToken> c) const = 0;
};

/// sqrt(alpha_bar[n]) x0 + sqrt(1 - alpha_bar[n]) eps.
Tensor add_noise(const Tensor& x0, const Tensor& eps, int n, const NoiseSchedule& sched);
/// Per-row timesteps.
Tensor add_noise(const Tensor& x0, const Tensor& eps, std::span<const int> n, const NoiseSchedule& sched);

/// Deterministic DDIM step from n_from to n_to (n_to < n_from; equality returns x).
Tensor ddim_step(const Denoiser& model, const Tensor& x, int n_from, int n_to, std::span<const CondToken> c,
                 const NoiseSchedule& sched);

/// Guided DDIM step: x + (1 + w) d_c - w d_null where d_* are the plain DDIM
/// increments under the class and the null token. w = 0 returns ddim_step.
Tensor cfg_ddim_step(const Denoiser& model, const Tensor& x, int n_from, int n_to, std::span<const CondToken> c,
                     double w, const NoiseSchedule& sched);

/// Per-row variant used by distillation, where each row sits at its own timestep.
Tensor cfg_ddim_step_rows(const Denoiser& model, const Tensor& x, std::span<const int> n_from,
                          std::span<const int> n_to, std::span<const CondToken> c, double w,
                          const NoiseSchedule& sched);

/// `count` uniform steps from N down to 0 (count + 1 timesteps).
std::vector<int> uniform_timesteps(int num_steps, int count);

/// Draws x_N ~ N(0, I) and applies guided DDIM along `steps` (strictly decreasing, ending at 0).
Tensor ddim_sample(const Denoiser& model, std::span<const CondToken> c, double w, std::span<const int> steps,
                   const NoiseSchedule& sched, std::uint64_t seed);

}  // namespace mcm
