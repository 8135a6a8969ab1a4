#pragma once

#include <atomic>
#include <cstdint>
#include <span>
#include <vector>

#include "mcm/consistency.hpp"
#include "mcm/diffusion.hpp"
#include "mcm/tensor.hpp"

namespace mcm {

/// An h x w window of a long grid with its top-left corner at (row, col).
struct CropSpec {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  friend bool operator==(const CropSpec&, const CropSpec&) = default;
};

struct CropSet {
  std::vector<CropSpec> crops;
  std::size_t step = 1;
  std::size_t height = 0;  // long grid height H'
  std::size_t width = 0;   // long grid width W'
  std::vector<int> cover;  // H' x W', number of crops containing each cell

  std::size_t size() const noexcept { return crops.size(); }
  int cover_count(std::size_t r, std::size_t c) const { return cover.at(r * width + c); }
};

/// Sliding windows at offsets (i*step, j*step). Throws ConfigError when step
/// does not divide the extents.
CropSet make_crops(std::size_t Hp, std::size_t Wp, std::size_t H, std::size_t W, std::size_t step);

/// g_i(X) for a [C, H', W'] grid.
Tensor extract_crop(const Tensor& grid, const CropSpec& crop);

/// argmin_X sum_i |g_i(X) - updates[i]|^2: each cell is the mean of the updates covering it.
Tensor fuse_lsq(std::span<const Tensor> updates, const CropSet& crops);

/// Shared restricted generation on a [C, Hp, Wp] grid with a few-step consistency sampler.
/// Crops are evaluated in model calls of at most `batch` rows.
Tensor long_sample(const Denoiser& student, const ConsistencySchedule& csched, const NoiseSchedule& sched,
                   std::size_t Hp, std::size_t Wp, CondToken c, int num_steps, std::size_t step, std::uint64_t seed,
                   std::size_t batch);

/// Baseline: each crop sampled on its own with its own noise, then fused.
Tensor independent_long_sample(const Denoiser& student, const ConsistencySchedule& csched,
                               const NoiseSchedule& sched, std::size_t Hp, std::size_t Wp, CondToken c,
                               int num_steps, std::size_t step, std::uint64_t seed);

/// Mean |X[:, :, kW] - X[:, :, kW - 1]| over the seams k = 1 .. W'/W - 1.
double seam_discontinuity(const Tensor& grid, std::size_t crop_width);

/// Counts rows evaluated and model invocations of a wrapped denoiser.
class CallCounter : public Denoiser {
 public:
  explicit CallCounter(const Denoiser& inner) : inner_(inner) {}

  GridShape grid_shape() const override { return inner_.grid_shape(); }
  Tensor predict_eps(const Tensor& x, std::span<const int> n, std::span<const CondToken> c) const override;

  std::uint64_t rows() const noexcept { return rows_; }
  std::uint64_t invocations() const noexcept { return invocations_; }
  void reset() noexcept { rows_ = 0; invocations_ = 0; }

 private:
  const Denoiser& inner_;
  mutable std::atomic<std::uint64_t> rows_{0};
  mutable std::atomic<std::uint64_t> invocations_{0};
};

}  // namespace mcm
