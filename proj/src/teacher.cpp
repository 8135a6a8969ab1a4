#include "mcm/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mcm/error.hpp"
#include "mcm/rng.hpp"

namespace mcm {

void TeacherTrainConfig::validate() const {
  if (batch == 0) throw ConfigError("teacher.batch must be positive");
  if (!(lr > 0.0)) throw ConfigError("teacher.lr must be positive");
  if (lr_final > lr) throw ConfigError("teacher.lr_final must not exceed teacher.lr");
  if (!(weight_decay >= 0.0)) throw ConfigError("teacher.weight_decay must be >= 0");
  if (!(cfg_dropout >= 0.0 && cfg_dropout <= 1.0)) throw ConfigError("teacher.cfg_dropout must lie in [0, 1]");
}

Var teacher_loss(Tape& tape, const DenoiserModel& model, const Bindings& p, const Tensor& x0, const Tensor& eps,
                 std::span<const int> n, std::span<const CondToken> c, const NoiseSchedule& sched) {
  const Tensor xn = add_noise(x0, eps, n, sched);
  Tensor v(x0.shape());
  const std::size_t cols = x0.cols();
  for (std::size_t r = 0; r < n.size(); ++r) {
    const double a = sched.sqrt_alpha_bar(n[r]), s = sched.sqrt_one_minus_alpha_bar(n[r]);
    for (std::size_t j = 0; j < cols; ++j) v[r * cols + j] = a * eps[r * cols + j] - s * x0[r * cols + j];
  }
  Var pred = model.forward_v(tape, p, tape.constant(xn), n, c);
  return ad::mean(ad::square(ad::sub(pred, tape.constant(v))));
}

std::vector<TeacherLogRow> train_teacher(DenoiserModel& model, std::span<const SpectrogramSample> data,
                                         const NoiseSchedule& sched, const TeacherTrainConfig& cfg,
                                         std::uint64_t seed, const TeacherCallback& on_step) {
  cfg.validate();
  if (data.empty()) throw ConfigError("teacher training needs a non-empty dataset");
  if (model.schedule().alpha_bar != sched.alpha_bar) throw ConfigError("model and training noise schedules differ");
  auto order_rng = Rng::split(seed, "teacher-order");
  auto rng = Rng::split(seed, "teacher-noise");
  auto opt = AdamWState::init(model.params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<std::size_t> order(data.size());
  std::vector<TeacherLogRow> log;
  std::uint64_t step = 0;
  const double total_steps = static_cast<double>(cfg.epochs * ((data.size() + cfg.batch - 1) / cfg.batch));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
    }
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch);
      std::vector<Tensor> grids;
      std::vector<CondToken> c;
      std::vector<int> n;
      for (std::size_t j = begin; j < end; ++j) {
        const auto& s = data[order[j]];
        grids.push_back(s.grid);
        c.push_back(rng.uniform() < cfg.cfg_dropout ? CondToken::null() : CondToken::cls(s.label));
        n.push_back(static_cast<int>(rng.integer(1, sched.num_steps)));
      }
      const Tensor x0 = stack_grids(grids);
      const Tensor eps = rng.normal_tensor(x0.shape());
      Tape tape;
      auto p = bind_all(tape, model.params(), true);
      Var loss = teacher_loss(tape, model, p, x0, eps, n, c, sched);
      if (!loss.value().all_finite()) throw NumericError("non-finite teacher loss at step " + std::to_string(step));
      tape.backward(loss);
      if (cfg.lr_final >= 0.0) {
        const double progress = static_cast<double>(step) / total_steps;
        opt.config.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
      }
      adamw_step(model.params(), collect_grads(tape, p, model.params()), opt);
      log.push_back({step, loss.value().item()});
      if (on_step) on_step(log.back());
      ++step;
    }
  }
  return log;
}

}  // namespace mcm
