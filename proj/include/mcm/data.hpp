#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mcm/grid.hpp"
#include "mcm/tensor.hpp"

namespace mcm {

struct SpectrogramSample {
  Tensor grid;  // [C, H, W], values in [-1, 1]
  int label = 0;
};

struct DatasetSpec {
  std::size_t num_samples = 1500;
  int num_classes = 3;
  GridShape grid;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Procedural class families, cycled by class id: harmonic stacks (horizontal
/// bands), chirps (diagonal ridges) and pulses (periodic vertical bars). Class
/// ids past the third family reuse a family at a shifted frequency range.
/// Labels are assigned round-robin.
std::vector<SpectrogramSample> synth_dataset(const DatasetSpec& spec);

/// Stacks sample grids into [B, C, H, W].
Tensor stack_grids(std::span<const SpectrogramSample> samples);
Tensor stack_grids(std::span<const Tensor> grids);
/// Grid `i` of a [B, C, H, W] batch as [C, H, W].
Tensor unstack_grid(const Tensor& batch, std::size_t i);

// "MCMG" grid file: magic "MCMG" | version u32 | rank u32 | dims u64 x rank | values f64 x prod(dims).
inline constexpr std::uint32_t kGridFormatVersion = 1;

std::vector<std::uint8_t> encode_grid(const Tensor& grid);
Tensor decode_grid(std::span<const std::uint8_t> bytes);
void save_grid(const Tensor& grid, const std::filesystem::path& path);
Tensor load_grid(const std::filesystem::path& path);

/// One CSV row per (channel, row) of a [C, H, W] grid.
void save_grid_csv(const Tensor& grid, const std::filesystem::path& path);

}  // namespace mcm
