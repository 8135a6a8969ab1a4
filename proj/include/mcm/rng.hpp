#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "mcm/tensor.hpp"

namespace mcm {

/// Seeded generator. Streams for separate purposes are split off by label so
/// that adding draws to one purpose never shifts another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// A child generator seeded from (seed, label) only.
  static Rng split(std::uint64_t seed, std::string_view label);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }

  Tensor normal_tensor(Shape shape);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace mcm
