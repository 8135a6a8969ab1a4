#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mcm/autodiff.hpp"
#include "mcm/data.hpp"
#include "mcm/diffusion.hpp"
#include "mcm/models.hpp"
#include "mcm/optim.hpp"
#include "mcm/rng.hpp"

namespace mcm {

/// Boundary-respecting skip/output weights:
///   c_skip[n] = sd^2 / (tau_n^2 + sd^2),  c_out[n] = tau_n / sqrt(tau_n^2 + sd^2),
/// with tau_n = time_scale * n, so c_skip[0] = 1 and c_out[0] = 0.
struct ConsistencySchedule {
  std::vector<double> c_skip;
  std::vector<double> c_out;

  static ConsistencySchedule make(const NoiseSchedule& sched, double sigma_data = 0.5, double time_scale = 10.0);
};

/// c_skip[n] x + c_out[n] x0(x, n, c), with x0 recovered from the eps prediction.
Var consistency_fn(Tape& tape, const DenoiserModel& model, const Bindings& params, const ConsistencySchedule& csched,
                   const NoiseSchedule& sched, Var x, std::span<const int> n, std::span<const CondToken> c);
Tensor consistency_fn(const Denoiser& model, const ConsistencySchedule& csched, const NoiseSchedule& sched,
                      const Tensor& x, std::span<const int> n, std::span<const CondToken> c);

enum class Distance { L2, Huber };

struct DistillConfig {
  int k = 20;
  double w = 2.0;
  double lambda = 3.0;
  double gamma = 1.0;
  double ema_rate = 0.95;
  double lr = 1e-5;
  double disc_lr = 1e-5;
  double weight_decay = 0.01;
  Distance distance = Distance::L2;
  double huber_delta = 0.01;
  std::size_t batch = 32;

  void validate(int num_steps) const;
};

/// Mean-reduced d(a, b). Huber is the pseudo-Huber sqrt(d^2 + delta^2) - delta.
Var distance(Var a, Var b, Distance kind, double huber_delta);

struct DistillBatch {
  Tensor x0;                  // [B, C, H, W]
  std::vector<CondToken> c;   // class tokens
  std::vector<int> n;         // target timesteps; the student sees n + k
  Tensor eps;                 // forward-diffusion noise, same shape as x0
};

struct DistillPair {
  Var loss;       // scalar, differentiable w.r.t. the student
  Var x0_pred;    // student output a
  Tensor target;  // EMA output b (constant)
  Tensor x_noisy; // x_{n+k}
  Tensor x_hat;   // guided teacher estimate at n
};

/// x_{n+k} = add_noise(x0, eps, n+k); x_hat = guided DDIM(teacher, x_{n+k}, n+k -> n);
/// a = f_student(x_{n+k}, n+k); b = f_ema(x_hat, n) (constant); loss = d(a, b).
DistillPair distill_pair(Tape& tape, const DenoiserModel& student, const Bindings& student_params,
                         const Denoiser& teacher, const Denoiser& ema, const DistillBatch& batch,
                         const DistillConfig& cfg, const NoiseSchedule& sched, const ConsistencySchedule& csched);

/// -mean_b sum_k D_k(F_k(x0_pred), c). Head parameters in `heads_params` should be constants.
Var adv_generator_loss(Tape& tape, const DiscHeadSet& heads, const Bindings& heads_params, const FeatureNet& fnet,
                       Var x0_pred, std::span<const CondToken> c);

/// mean_b sum_k [max(0, 1 - D_k(real)) + gamma |grad_h D_k(real)|^2 + max(0, 1 + D_k(fake))].
Var adv_discriminator_loss(Tape& tape, const DiscHeadSet& heads, const Bindings& heads_params,
                           const FeatureNet& fnet, const Tensor& x0_real, const Tensor& x0_fake,
                           std::span<const CondToken> c, double gamma);

Var total_loss(Var adv_g, Var distil, double lambda);
double total_loss(double adv_g, double distil, double lambda);

struct TrainState {
  ParamSet student;
  ParamSet ema;
  ParamSet disc;
  AdamWState student_opt;
  AdamWState disc_opt;
  std::uint64_t step = 0;
};

struct DistillLogRow {
  std::uint64_t step = 0;
  double distil = 0.0;
  double adv_g = 0.0;
  double adv_d = 0.0;
};

/// Alternating student / discriminator updates with an EMA target, one D step per G step.
class Distiller {
 public:
  Distiller(const DenoiserModel& teacher, const FeatureNet& fnet, DiscHeadSet disc, NoiseSchedule sched,
            ConsistencySchedule csched, DistillConfig cfg, std::uint64_t seed);

  DistillLogRow step(std::span<const SpectrogramSample> data);

  /// Distillation loss of the current student/EMA pair on a fixed batch; no update.
  double distill_loss(const DistillBatch& batch) const;

  const DenoiserModel& student() const noexcept { return student_; }
  const DenoiserModel& ema() const noexcept { return ema_; }
  const DiscHeadSet& disc() const noexcept { return disc_; }
  TrainState state() const;

 private:
  DistillBatch draw_batch(std::span<const SpectrogramSample> data);

  const DenoiserModel& teacher_;
  const FeatureNet& fnet_;
  DenoiserModel student_;
  DenoiserModel ema_;
  DiscHeadSet disc_;
  NoiseSchedule sched_;
  ConsistencySchedule csched_;
  DistillConfig cfg_;
  AdamWState student_opt_;
  AdamWState disc_opt_;
  Rng rng_;
  std::uint64_t step_ = 0;
};

struct DistillResult {
  TrainState state;
  std::vector<DistillLogRow> log;
};

using DistillCallback = std::function<void(const DistillLogRow&)>;

DistillResult distill_train(const DenoiserModel& teacher, std::span<const SpectrogramSample> data,
                            const FeatureNet& fnet, DiscHeadSet disc, const NoiseSchedule& sched,
                            const ConsistencySchedule& csched, const DistillConfig& cfg, std::uint64_t steps,
                            std::uint64_t seed, const DistillCallback& on_step = {});

/// Timesteps visited by a `num_steps`-step consistency sampler, N first.
std::vector<int> consistency_timesteps(int num_steps_total, int num_steps);

/// Few-step consistency sampling: start from N(0, I) at N, predict x0, re-noise
/// to the next timestep of a uniform sub-schedule with fresh noise, repeat.
Tensor cm_sample(const Denoiser& student, const ConsistencySchedule& csched, const NoiseSchedule& sched,
                 std::span<const CondToken> c, int num_steps, std::uint64_t seed);

}  // namespace mcm
