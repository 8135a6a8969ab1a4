#include "mcm/diffusion.hpp"

#include <cmath>

#include "mcm/error.hpp"
#include "mcm/rng.hpp"

namespace mcm {

std::size_t CondToken::row(int num_classes) const {
  if (is_null()) return static_cast<std::size_t>(num_classes);
  if (id_ >= num_classes) {
    throw ContractError("class id " + std::to_string(id_) + " out of range for " + std::to_string(num_classes) +
                        " classes");
  }
  return static_cast<std::size_t>(id_);
}

std::vector<CondToken> repeat_token(CondToken c, std::size_t n) { return std::vector<CondToken>(n, c); }

std::size_t batch_size(const Tensor& x, const GridShape& grid) {
  if (x.size() == 0 || x.size() % grid.size() != 0) {
    throw StructuralError("tensor of shape " + shape_string(x.shape()) + " is not a batch of " +
                          shape_string(grid.shape()) + " grids");
  }
  return x.size() / grid.size();
}

void NoiseSchedule::check_index(int n) const {
  if (n < 0 || n > num_steps) {
    throw ContractError("timestep " + std::to_string(n) + " outside [0, " + std::to_string(num_steps) + "]");
  }
}

double NoiseSchedule::sqrt_alpha_bar(int n) const {
  check_index(n);
  return std::sqrt(alpha_bar[static_cast<std::size_t>(n)]);
}

double NoiseSchedule::sqrt_one_minus_alpha_bar(int n) const {
  check_index(n);
  return std::sqrt(1.0 - alpha_bar[static_cast<std::size_t>(n)]);
}

NoiseSchedule make_schedule(int num_steps, double beta_min, double beta_max) {
  if (num_steps < 1) throw ConfigError("schedule.n must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ConfigError("schedule betas must satisfy 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.num_steps = num_steps;
  s.beta.resize(static_cast<std::size_t>(num_steps));
  s.alpha_bar.resize(static_cast<std::size_t>(num_steps) + 1);
  s.alpha_bar[0] = 1.0;
  for (int i = 0; i < num_steps; ++i) {
    const double frac = num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
    const double b = beta_min == beta_max ? beta_min : beta_min + (beta_max - beta_min) * frac;
    s.beta[static_cast<std::size_t>(i)] = b;
    s.alpha_bar[static_cast<std::size_t>(i) + 1] = s.alpha_bar[static_cast<std::size_t>(i)] * (1.0 - b);
  }
  return s;
}

Tensor add_noise(const Tensor& x0, const Tensor& eps, int n, const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape()) {
    throw StructuralError("add_noise: x0 " + shape_string(x0.shape()) + " vs eps " + shape_string(eps.shape()));
  }
  const double a = sched.sqrt_alpha_bar(n);
  const double s = sched.sqrt_one_minus_alpha_bar(n);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + s * eps[i];
  return out;
}

Tensor add_noise(const Tensor& x0, const Tensor& eps, std::span<const int> n, const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape()) throw StructuralError("add_noise: x0/eps shape mismatch");
  if (x0.rows() != n.size()) throw StructuralError("add_noise: one timestep per row required");
  const std::size_t cols = x0.cols();
  Tensor out(x0.shape());
  for (std::size_t r = 0; r < n.size(); ++r) {
    const double a = sched.sqrt_alpha_bar(n[r]);
    const double s = sched.sqrt_one_minus_alpha_bar(n[r]);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = a * x0[r * cols + c] + s * eps[r * cols + c];
  }
  return out;
}

namespace {

void check_rows(const Tensor& x, const GridShape& grid, std::size_t tokens) {
  if (batch_size(x, grid) != tokens) throw StructuralError("one conditioning token per grid required");
}

// DDIM update of each row given its eps prediction.
Tensor ddim_from_eps(const Tensor& x, const Tensor& eps, std::span<const int> n_from, std::span<const int> n_to,
                     const NoiseSchedule& sched) {
  const std::size_t rows = n_from.size();
  const std::size_t cols = x.size() / rows;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double a_from = sched.sqrt_alpha_bar(n_from[r]);
    const double s_from = sched.sqrt_one_minus_alpha_bar(n_from[r]);
    const double a_to = sched.sqrt_alpha_bar(n_to[r]);
    const double s_to = sched.sqrt_one_minus_alpha_bar(n_to[r]);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const double x0 = (x[i] - s_from * eps[i]) / a_from;
      out[i] = a_to * x0 + s_to * eps[i];
    }
  }
  return out;
}

Tensor ddim_rows(const Denoiser& model, const Tensor& x, std::span<const int> n_from, std::span<const int> n_to,
                 std::span<const CondToken> c, const NoiseSchedule& sched) {
  check_rows(x, model.grid_shape(), c.size());
  if (n_from.size() != c.size() || n_to.size() != c.size()) throw StructuralError("one timestep per row required");
  bool all_identity = true;
  for (std::size_t r = 0; r < c.size(); ++r) {
    sched.check_index(n_from[r]);
    sched.check_index(n_to[r]);
    if (n_to[r] > n_from[r]) {
      throw ContractError("ddim_step requires n_to < n_from (got " + std::to_string(n_from[r]) + " -> " +
                          std::to_string(n_to[r]) + ")");
    }
    all_identity = all_identity && n_to[r] == n_from[r];
  }
  if (all_identity) return x;
  Tensor eps = model.predict_eps(x, n_from, c);
  return ddim_from_eps(x, eps, n_from, n_to, sched);
}

}  // namespace

Tensor ddim_step(const Denoiser& model, const Tensor& x, int n_from, int n_to, std::span<const CondToken> c,
                 const NoiseSchedule& sched) {
  std::vector<int> from(c.size(), n_from), to(c.size(), n_to);
  return ddim_rows(model, x, from, to, c, sched);
}

Tensor cfg_ddim_step_rows(const Denoiser& model, const Tensor& x, std::span<const int> n_from,
                          std::span<const int> n_to, std::span<const CondToken> c, double w,
                          const NoiseSchedule& sched) {
  if (!(w >= 0.0)) throw ContractError("guidance weight w must be >= 0");
  for (auto tok : c) {
    if (tok.is_null()) throw ContractError("classifier-free guidance needs a class token, got null");
  }
  if (w == 0.0) return ddim_rows(model, x, n_from, n_to, c, sched);

  // Conditional and unconditional branches share one batched model call.
  const std::size_t rows = c.size();
  check_rows(x, model.grid_shape(), rows);
  std::vector<CondToken> tokens(c.begin(), c.end());
  tokens.insert(tokens.end(), rows, CondToken::null());
  std::vector<int> from2(n_from.begin(), n_from.end()), to2(n_to.begin(), n_to.end());
  from2.insert(from2.end(), n_from.begin(), n_from.end());
  to2.insert(to2.end(), n_to.begin(), n_to.end());
  Tensor xx = concat_rows(std::vector<Tensor>{x, x});
  Tensor both = ddim_rows(model, xx, from2, to2, tokens, sched);

  Tensor out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double d_cond = both[i] - x[i];
    const double d_null = both[n + i] - x[i];
    out[i] = x[i] + (1.0 + w) * d_cond - w * d_null;
  }
  return out;
}

Tensor cfg_ddim_step(const Denoiser& model, const Tensor& x, int n_from, int n_to, std::span<const CondToken> c,
                     double w, const NoiseSchedule& sched) {
  std::vector<int> from(c.size(), n_from), to(c.size(), n_to);
  return cfg_ddim_step_rows(model, x, from, to, c, w, sched);
}

std::vector<int> uniform_timesteps(int num_steps, int count) {
  if (count < 1 || count > num_steps) {
    throw ContractError("step count must lie in [1, " + std::to_string(num_steps) + "]");
  }
  std::vector<int> out;
  for (int i = 0; i <= count; ++i) {
    out.push_back(static_cast<int>(std::lround(static_cast<double>(num_steps) * (count - i) / count)));
  }
  return out;
}

Tensor ddim_sample(const Denoiser& model, std::span<const CondToken> c, double w, std::span<const int> steps,
                   const NoiseSchedule& sched, std::uint64_t seed) {
  if (steps.empty()) throw ContractError("ddim_sample needs a non-empty step list");
  if (steps.back() != 0) throw ContractError("ddim_sample step list must end at 0");
  for (std::size_t i = 1; i < steps.size(); ++i) {
    if (steps[i] >= steps[i - 1]) throw ContractError("ddim_sample step list must be strictly decreasing");
  }
  if (c.empty()) throw ContractError("ddim_sample needs at least one conditioning token");
  sched.check_index(steps.front());

  auto rng = Rng::split(seed, "noise");
  Tensor x = rng.normal_tensor(model.grid_shape().batch(c.size()));
  for (std::size_t i = 1; i < steps.size(); ++i) {
    if (w == 0.0) x = ddim_step(model, x, steps[i - 1], steps[i], c, sched);
    else x = cfg_ddim_step(model, x, steps[i - 1], steps[i], c, w, sched);
  }
  return x;
}

}  // namespace mcm
