#include "mcm/consistency.hpp"

#include <cmath>

#include "mcm/error.hpp"

namespace mcm {

ConsistencySchedule ConsistencySchedule::make(const NoiseSchedule& sched, double sigma_data, double time_scale) {
  if (!(sigma_data > 0.0) || !(time_scale > 0.0)) throw ConfigError("sigma_data and time_scale must be positive");
  ConsistencySchedule cs;
  const double sd2 = sigma_data * sigma_data;
  for (int n = 0; n <= sched.num_steps; ++n) {
    const double tau = time_scale * n;
    cs.c_skip.push_back(sd2 / (tau * tau + sd2));
    cs.c_out.push_back(tau / std::sqrt(tau * tau + sd2));
  }
  return cs;
}

namespace {

Tensor per_row(std::span<const int> n, const std::vector<double>& table) {
  Tensor t({n.size()});
  for (std::size_t i = 0; i < n.size(); ++i) t[i] = table.at(static_cast<std::size_t>(n[i]));
  return t;
}

void check_timesteps(std::span<const int> n, const NoiseSchedule& sched, const ConsistencySchedule& cs) {
  if (cs.c_skip.size() != static_cast<std::size_t>(sched.num_steps) + 1) {
    throw StructuralError("consistency schedule length does not match the noise schedule");
  }
  for (int v : n) sched.check_index(v);
}

}  // namespace

Var consistency_fn(Tape& tape, const DenoiserModel& model, const Bindings& params, const ConsistencySchedule& csched,
                   const NoiseSchedule& sched, Var x, std::span<const int> n, std::span<const CondToken> c) {
  check_timesteps(n, sched, csched);
  Tensor s_noise({n.size()}), inv_signal({n.size()});
  for (std::size_t i = 0; i < n.size(); ++i) {
    s_noise[i] = sched.sqrt_one_minus_alpha_bar(n[i]);
    inv_signal[i] = 1.0 / sched.sqrt_alpha_bar(n[i]);
  }
  Var eps = model.forward(tape, params, x, n, c);
  Var xv = ad::reshape(x, eps.shape());
  Var x0 = ad::mul_col(ad::sub(xv, ad::mul_col(eps, tape.constant(s_noise))), tape.constant(inv_signal));
  return ad::add(ad::mul_col(xv, tape.constant(per_row(n, csched.c_skip))),
                 ad::mul_col(x0, tape.constant(per_row(n, csched.c_out))));
}

Tensor consistency_fn(const Denoiser& model, const ConsistencySchedule& csched, const NoiseSchedule& sched,
                      const Tensor& x, std::span<const int> n, std::span<const CondToken> c) {
  check_timesteps(n, sched, csched);
  const std::size_t rows = batch_size(x, model.grid_shape());
  if (n.size() != rows) throw StructuralError("consistency_fn: one timestep per grid required");
  const Tensor eps = model.predict_eps(x, n, c);
  const std::size_t cols = model.grid_shape().size();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto ni = static_cast<std::size_t>(n[r]);
    const double a = sched.sqrt_alpha_bar(n[r]);
    const double s = sched.sqrt_one_minus_alpha_bar(n[r]);
    const double skip = csched.c_skip[ni], cout = csched.c_out[ni];
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t i = r * cols + j;
      const double x0 = (x[i] - s * eps[i]) / a;
      out[i] = skip * x[i] + cout * x0;
    }
  }
  return out;
}

void DistillConfig::validate(int num_steps) const {
  if (k < 1 || k > num_steps) throw ConfigError("distill.k must lie in [1, N]");
  if (!(w >= 0.0)) throw ConfigError("distill.w must be >= 0");
  if (!(lambda >= 0.0)) throw ConfigError("distill.lambda must be >= 0");
  if (!(gamma >= 0.0)) throw ConfigError("distill.gamma must be >= 0");
  if (!(ema_rate >= 0.0 && ema_rate <= 1.0)) throw ConfigError("distill.ema_rate must lie in [0, 1]");
  if (!(lr >= 0.0) || !(disc_lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
  if (!(huber_delta > 0.0)) throw ConfigError("distill.huber_delta must be > 0");
  if (batch == 0) throw ConfigError("distill.batch must be positive");
}

Var distance(Var a, Var b, Distance kind, double huber_delta) {
  Var d = ad::sub(a, b);
  if (kind == Distance::L2) return ad::mean(ad::square(d));
  Var r = ad::sqrt(ad::add_scalar(ad::square(d), huber_delta * huber_delta));
  return ad::add_scalar(ad::mean(r), -huber_delta);
}

DistillPair distill_pair(Tape& tape, const DenoiserModel& student, const Bindings& student_params,
                         const Denoiser& teacher, const Denoiser& ema, const DistillBatch& batch,
                         const DistillConfig& cfg, const NoiseSchedule& sched, const ConsistencySchedule& csched) {
  const std::size_t B = batch.c.size();
  if (batch.n.size() != B || batch_size(batch.x0, student.grid_shape()) != B) {
    throw StructuralError("distill_pair: batch fields disagree in size");
  }
  std::vector<int> n_plus(B);
  for (std::size_t i = 0; i < B; ++i) {
    if (batch.n[i] < 0 || batch.n[i] + cfg.k > sched.num_steps) {
      throw ContractError("distill_pair requires 0 <= n and n + k <= N (n = " + std::to_string(batch.n[i]) + ")");
    }
    n_plus[i] = batch.n[i] + cfg.k;
  }
  DistillPair out;
  out.x_noisy = add_noise(batch.x0, batch.eps, n_plus, sched);
  out.x_hat = cfg_ddim_step_rows(teacher, out.x_noisy, n_plus, batch.n, batch.c, cfg.w, sched);
  out.target = consistency_fn(ema, csched, sched, out.x_hat, batch.n, batch.c);
  out.x0_pred = consistency_fn(tape, student, student_params, csched, sched, tape.constant(out.x_noisy), n_plus,
                               batch.c);
  out.loss = distance(out.x0_pred, tape.constant(out.target), cfg.distance, cfg.huber_delta);
  return out;
}

Var adv_generator_loss(Tape& tape, const DiscHeadSet& heads, const Bindings& heads_params, const FeatureNet& fnet,
                       Var x0_pred, std::span<const CondToken> c) {
  if (heads.num_heads() != fnet.num_taps()) throw StructuralError("one discriminator head per feature tap required");
  const std::size_t B = c.size();
  auto taps = fnet.taps(tape, x0_pred);
  Var total;
  for (std::size_t k = 0; k < taps.size(); ++k) {
    Var s = ad::sum(heads.score(tape, heads_params, taps[k], k, c));
    total = total.valid() ? ad::add(total, s) : s;
  }
  return ad::scale(total, -1.0 / static_cast<double>(B));
}

Var adv_discriminator_loss(Tape& tape, const DiscHeadSet& heads, const Bindings& heads_params,
                           const FeatureNet& fnet, const Tensor& x0_real, const Tensor& x0_fake,
                           std::span<const CondToken> c, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("R1 coefficient gamma must be >= 0");
  if (heads.num_heads() != fnet.num_taps()) throw StructuralError("one discriminator head per feature tap required");
  const std::size_t B = c.size();
  const auto real = fnet.features(x0_real);
  const auto fake = fnet.features(x0_fake);
  Var total;
  for (std::size_t k = 0; k < real.size(); ++k) {
    Var hr = tape.constant(real[k]);
    Var hf = tape.constant(fake[k]);
    Var d_real = heads.score(tape, heads_params, hr, k, c);
    Var d_fake = heads.score(tape, heads_params, hf, k, c);
    Var term = ad::add(ad::sum(ad::relu(ad::add_scalar(ad::scale(d_real, -1.0), 1.0))),
                       ad::sum(ad::relu(ad::add_scalar(d_fake, 1.0))));
    if (gamma > 0.0) {
      term = ad::add(term, ad::scale(ad::sum_sq(heads.input_grad(tape, heads_params, hr, k, c)), gamma));
    }
    total = total.valid() ? ad::add(total, term) : term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(B));
}

Var total_loss(Var adv_g, Var distil, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  return ad::add(adv_g, ad::scale(distil, lambda));
}

double total_loss(double adv_g, double distil, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  return adv_g + lambda * distil;
}

// ---------------------------------------------------------------------------

Distiller::Distiller(const DenoiserModel& teacher, const FeatureNet& fnet, DiscHeadSet disc, NoiseSchedule sched,
                     ConsistencySchedule csched, DistillConfig cfg, std::uint64_t seed)
    : teacher_(teacher),
      fnet_(fnet),
      student_(teacher.config(), teacher.params()),
      ema_(teacher.config(), teacher.params()),
      disc_(std::move(disc)),
      sched_(std::move(sched)),
      csched_(std::move(csched)),
      cfg_(cfg),
      student_opt_(AdamWState::init(teacher.params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay})),
      disc_opt_(AdamWState::init(disc_.params(), {cfg.disc_lr, 0.9, 0.999, 1e-8, cfg.weight_decay})),
      rng_(Rng::split(seed, "distill")) {
  cfg_.validate(sched_.num_steps);
  if (teacher.schedule().alpha_bar != sched_.alpha_bar) throw ConfigError("teacher and distillation noise schedules differ");
  if (disc_.num_heads() != fnet_.num_taps()) throw StructuralError("one discriminator head per feature tap required");
}

DistillBatch Distiller::draw_batch(std::span<const SpectrogramSample> data) {
  if (data.empty()) throw ConfigError("distillation dataset is empty");
  DistillBatch b;
  std::vector<Tensor> grids;
  for (std::size_t i = 0; i < cfg_.batch; ++i) {
    const auto& s = data[static_cast<std::size_t>(rng_.integer(0, static_cast<std::int64_t>(data.size()) - 1))];
    grids.push_back(s.grid);
    b.c.push_back(CondToken::cls(s.label));
    b.n.push_back(static_cast<int>(rng_.integer(0, sched_.num_steps - cfg_.k)));
  }
  b.x0 = stack_grids(grids);
  b.eps = rng_.normal_tensor(b.x0.shape());
  return b;
}

DistillLogRow Distiller::step(std::span<const SpectrogramSample> data) {
  DistillBatch batch = draw_batch(data);
  DistillLogRow row;
  row.step = step_;

  Tensor fake;
  {
    Tape tape;
    auto sp = bind_all(tape, student_.params(), true);
    auto pair = distill_pair(tape, student_, sp, teacher_, ema_, batch, cfg_, sched_, csched_);
    auto hp = bind_all(tape, disc_.params(), false);
    Var adv_g = adv_generator_loss(tape, disc_, hp, fnet_, pair.x0_pred, batch.c);
    Var loss = total_loss(adv_g, pair.loss, cfg_.lambda);
    if (!loss.value().all_finite()) throw NumericError("non-finite student loss at step " + std::to_string(step_));
    tape.backward(loss);
    adamw_step(student_.params(), collect_grads(tape, sp, student_.params()), student_opt_);
    row.distil = pair.loss.value().item();
    row.adv_g = adv_g.value().item();
    fake = pair.x0_pred.value();
  }
  {
    Tape tape;
    auto dp = bind_all(tape, disc_.params(), true);
    Var adv_d = adv_discriminator_loss(tape, disc_, dp, fnet_, batch.x0, fake, batch.c, cfg_.gamma);
    if (!adv_d.value().all_finite()) throw NumericError("non-finite discriminator loss");
    tape.backward(adv_d);
    adamw_step(disc_.params(), collect_grads(tape, dp, disc_.params()), disc_opt_);
    row.adv_d = adv_d.value().item();
  }
  ema_update(ema_.params(), student_.params(), cfg_.ema_rate);
  ++step_;
  return row;
}

double Distiller::distill_loss(const DistillBatch& batch) const {
  Tape tape;
  auto sp = bind_all(tape, student_.params(), false);
  return distill_pair(tape, student_, sp, teacher_, ema_, batch, cfg_, sched_, csched_).loss.value().item();
}

TrainState Distiller::state() const {
  return TrainState{student_.params(), ema_.params(), disc_.params(), student_opt_, disc_opt_, step_};
}

DistillResult distill_train(const DenoiserModel& teacher, std::span<const SpectrogramSample> data,
                            const FeatureNet& fnet, DiscHeadSet disc, const NoiseSchedule& sched,
                            const ConsistencySchedule& csched, const DistillConfig& cfg, std::uint64_t steps,
                            std::uint64_t seed, const DistillCallback& on_step) {
  if (data.empty()) throw ConfigError("distillation dataset is empty");
  Distiller d(teacher, fnet, std::move(disc), sched, csched, cfg, seed);
  DistillResult out;
  for (std::uint64_t s = 0; s < steps; ++s) {
    out.log.push_back(d.step(data));
    if (on_step) on_step(out.log.back());
  }
  out.state = d.state();
  return out;
}

std::vector<int> consistency_timesteps(int num_steps_total, int num_steps) {
  auto ts = uniform_timesteps(num_steps_total, num_steps);
  ts.pop_back();
  return ts;
}

Tensor cm_sample(const Denoiser& student, const ConsistencySchedule& csched, const NoiseSchedule& sched,
                 std::span<const CondToken> c, int num_steps, std::uint64_t seed) {
  if (num_steps < 1) throw ContractError("cm_sample needs at least one step");
  if (c.empty()) throw ContractError("cm_sample needs at least one conditioning token");
  const auto ts = consistency_timesteps(sched.num_steps, num_steps);
  auto rng = Rng::split(seed, "noise");
  const std::size_t B = c.size();
  Tensor x = rng.normal_tensor(student.grid_shape().batch(B));
  Tensor x0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    std::vector<int> n(B, ts[i]);
    x0 = consistency_fn(student, csched, sched, x, n, c);
    if (i + 1 < ts.size()) x = add_noise(x0, rng.normal_tensor(x0.shape()), ts[i + 1], sched);
  }
  return x0;
}

}  // namespace mcm
