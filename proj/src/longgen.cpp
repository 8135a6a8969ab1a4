#include "mcm/longgen.hpp"

#include <cmath>
#include <string>

#include "mcm/error.hpp"
#include "mcm/rng.hpp"

namespace mcm {

namespace {

void check_long_grid(const Tensor& grid) {
  if (grid.rank() != 3) throw StructuralError("long grid must be [C, H', W'], got " + shape_string(grid.shape()));
}

std::string extent_hint(const char* what, std::size_t big, std::size_t small, std::size_t step) {
  const std::size_t lower = small + ((big - small) / step) * step;
  return std::string("long.") + what + " - crop " + what + " = " + std::to_string(big - small) +
         " is not a multiple of long.step = " + std::to_string(step) + "; use long." + what + " = " +
         std::to_string(lower) + " or " + std::to_string(lower + step) + ", or a step dividing " +
         std::to_string(big - small);
}

}  // namespace

CropSet make_crops(std::size_t Hp, std::size_t Wp, std::size_t H, std::size_t W, std::size_t step) {
  if (H == 0 || W == 0) throw ConfigError("crop dims must be positive");
  if (H > Hp || W > Wp) {
    throw ConfigError("long grid " + std::to_string(Hp) + "x" + std::to_string(Wp) + " is smaller than the crop " +
                      std::to_string(H) + "x" + std::to_string(W) + "; increase long.height / long.width");
  }
  if (step == 0) throw ConfigError("long.step must be >= 1");
  if ((Hp - H) % step != 0) throw ConfigError(extent_hint("height", Hp, H, step));
  if ((Wp - W) % step != 0) throw ConfigError(extent_hint("width", Wp, W, step));
  CropSet set;
  set.step = step;
  set.height = Hp;
  set.width = Wp;
  set.cover.assign(Hp * Wp, 0);
  for (std::size_t i = 0; i <= (Hp - H) / step; ++i) {
    for (std::size_t j = 0; j <= (Wp - W) / step; ++j) {
      const CropSpec crop{i * step, j * step, H, W};
      for (std::size_t r = crop.row; r < crop.row + H; ++r) {
        for (std::size_t q = crop.col; q < crop.col + W; ++q) ++set.cover[r * Wp + q];
      }
      set.crops.push_back(crop);
    }
  }
  return set;
}

Tensor extract_crop(const Tensor& grid, const CropSpec& crop) {
  check_long_grid(grid);
  const std::size_t C = grid.dim(0), Hp = grid.dim(1), Wp = grid.dim(2);
  if (crop.h == 0 || crop.w == 0 || crop.row + crop.h > Hp || crop.col + crop.w > Wp) {
    throw ContractError("crop lies outside the long grid");
  }
  Tensor out({C, crop.h, crop.w});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t r = 0; r < crop.h; ++r) {
      for (std::size_t q = 0; q < crop.w; ++q) {
        out[(c * crop.h + r) * crop.w + q] = grid[(c * Hp + crop.row + r) * Wp + crop.col + q];
      }
    }
  }
  return out;
}

Tensor fuse_lsq(std::span<const Tensor> updates, const CropSet& crops) {
  if (updates.size() != crops.size()) {
    throw StructuralError("fuse_lsq: " + std::to_string(updates.size()) + " updates for " +
                          std::to_string(crops.size()) + " crops");
  }
  if (updates.empty()) throw StructuralError("fuse_lsq needs at least one crop");
  const std::size_t C = updates[0].rank() == 3 ? updates[0].dim(0) : 0;
  const std::size_t Hp = crops.height, Wp = crops.width;
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const auto& k = crops.crops[i];
    if (updates[i].shape() != Shape{C, k.h, k.w}) {
      throw StructuralError("update " + std::to_string(i) + " has shape " + shape_string(updates[i].shape()));
    }
  }
  // Each cell is ref + sum_i (u_i - ref) / count, with ref the first covering update,
  // so cells covered by identical values come out exact.
  Tensor ref({C, Hp, Wp});
  Tensor acc({C, Hp, Wp});
  std::vector<char> seen(Hp * Wp, 0);
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const auto& k = crops.crops[i];
    for (std::size_t r = 0; r < k.h; ++r) {
      for (std::size_t q = 0; q < k.w; ++q) {
        const std::size_t cell = (k.row + r) * Wp + k.col + q;
        for (std::size_t c = 0; c < C; ++c) {
          const double u = updates[i][(c * k.h + r) * k.w + q];
          const std::size_t at = c * Hp * Wp + cell;
          if (!seen[cell]) ref[at] = u;
          acc[at] += u - ref[at];
        }
        seen[cell] = 1;
      }
    }
  }
  Tensor out({C, Hp, Wp});
  for (std::size_t cell = 0; cell < Hp * Wp; ++cell) {
    const int count = crops.cover.at(cell);
    if (count <= 0) throw StructuralError("crop set leaves a cell uncovered");
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t at = c * Hp * Wp + cell;
      out[at] = ref[at] + acc[at] / count;
    }
  }
  return out;
}

Tensor long_sample(const Denoiser& student, const ConsistencySchedule& csched, const NoiseSchedule& sched,
                   std::size_t Hp, std::size_t Wp, CondToken c, int num_steps, std::size_t step, std::uint64_t seed,
                   std::size_t batch) {
  const GridShape g = student.grid_shape();
  const CropSet crops = make_crops(Hp, Wp, g.height, g.width, step);
  if (batch == 0) throw ConfigError("long.batch must be >= 1");
  if (num_steps < 1) throw ContractError("long_sample needs at least one step");
  const auto ts = consistency_timesteps(sched.num_steps, num_steps);
  auto rng = Rng::split(seed, "noise");
  const Shape long_shape{g.channels, Hp, Wp};
  Tensor x = rng.normal_tensor(long_shape);
  Tensor fused;
  for (std::size_t s = 0; s < ts.size(); ++s) {
    std::vector<Tensor> updates;
    updates.reserve(crops.size());
    for (std::size_t begin = 0; begin < crops.size(); begin += batch) {
      const std::size_t end = std::min(crops.size(), begin + batch);
      std::vector<Tensor> parts;
      for (std::size_t i = begin; i < end; ++i) parts.push_back(extract_crop(x, crops.crops[i]));
      const std::vector<int> n(end - begin, ts[s]);
      const auto tokens = repeat_token(c, end - begin);
      const Tensor out = consistency_fn(student, csched, sched, concat_rows(parts).reshaped(g.batch(end - begin)), n,
                                        tokens);
      for (std::size_t i = 0; i < end - begin; ++i) {
        updates.push_back(slice_rows(out, i, i + 1).reshaped(g.shape()));
      }
    }
    fused = fuse_lsq(updates, crops);
    if (s + 1 < ts.size()) x = add_noise(fused, rng.normal_tensor(long_shape), ts[s + 1], sched);
  }
  return fused;
}

Tensor independent_long_sample(const Denoiser& student, const ConsistencySchedule& csched,
                               const NoiseSchedule& sched, std::size_t Hp, std::size_t Wp, CondToken c,
                               int num_steps, std::size_t step, std::uint64_t seed) {
  const GridShape g = student.grid_shape();
  const CropSet crops = make_crops(Hp, Wp, g.height, g.width, step);
  const CondToken tokens[1] = {c};
  std::vector<Tensor> updates;
  for (std::size_t i = 0; i < crops.size(); ++i) {
    const std::uint64_t crop_seed = Rng::split(seed, "crop-" + std::to_string(i)).next_u64();
    updates.push_back(cm_sample(student, csched, sched, tokens, num_steps, crop_seed).reshaped(g.shape()));
  }
  return fuse_lsq(updates, crops);
}

double seam_discontinuity(const Tensor& grid, std::size_t crop_width) {
  check_long_grid(grid);
  const std::size_t C = grid.dim(0), H = grid.dim(1), W = grid.dim(2);
  if (crop_width == 0 || W % crop_width != 0 || W / crop_width < 2) {
    throw ContractError("seam_discontinuity needs a width that is a multiple (>= 2) of the crop width");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = crop_width; k < W; k += crop_width) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t r = 0; r < H; ++r) {
        total += std::abs(grid[(c * H + r) * W + k] - grid[(c * H + r) * W + k - 1]);
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

Tensor CallCounter::predict_eps(const Tensor& x, std::span<const int> n, std::span<const CondToken> c) const {
  rows_ += batch_size(x, inner_.grid_shape());
  ++invocations_;
  return inner_.predict_eps(x, n, c);
}

}  // namespace mcm
