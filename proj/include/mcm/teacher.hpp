#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mcm/data.hpp"
#include "mcm/diffusion.hpp"
#include "mcm/models.hpp"
#include "mcm/optim.hpp"

namespace mcm {

struct TeacherTrainConfig {
  std::size_t epochs = 60;
  std::size_t batch = 32;
  double lr = 1e-3;
  double lr_final = -1.0;  // cosine decay from lr to this over training; < 0 keeps lr constant
  double weight_decay = 0.0;
  double cfg_dropout = 0.1;  // probability of replacing the class with the null token

  void validate() const;
};

struct TeacherLogRow {
  std::uint64_t step = 0;
  double loss = 0.0;
};

using TeacherCallback = std::function<void(const TeacherLogRow&)>;

/// v-prediction MSE on one batch, i.e. eps MSE weighted by 1 / alpha_bar[n].
Var teacher_loss(Tape& tape, const DenoiserModel& model, const Bindings& p, const Tensor& x0, const Tensor& eps,
                  std::span<const int> n, std::span<const CondToken> c, const NoiseSchedule& sched);

/// Trains `model` in place. Timesteps are uniform on [1, N]; each epoch visits
/// the dataset once in a seeded shuffled order.
std::vector<TeacherLogRow> train_teacher(DenoiserModel& model, std::span<const SpectrogramSample> data,
                                         const NoiseSchedule& sched, const TeacherTrainConfig& cfg,
                                         std::uint64_t seed, const TeacherCallback& on_step = {});

}  // namespace mcm
