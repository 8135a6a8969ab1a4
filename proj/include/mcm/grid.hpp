#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mcm/tensor.hpp"

namespace mcm {

/// Latent grid dimensions: channels x height (frequency) x width (time).
struct GridShape {
  std::size_t channels = 4;
  std::size_t height = 16;
  std::size_t width = 32;

  std::size_t size() const noexcept { return channels * height * width; }
  Shape shape() const { return {channels, height, width}; }
  /// Shape of a batch of `n` grids.
  Shape batch(std::size_t n) const { return {n, channels, height, width}; }

  friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// Conditioning token: a class id, or the unconditional (null) token.
class CondToken {
 public:
  static CondToken null() { return CondToken(-1); }
  static CondToken cls(int id) { return CondToken(id); }

  bool is_null() const noexcept { return id_ < 0; }
  int id() const noexcept { return id_; }
  /// Row into a class table that holds the null row at index `num_classes`.
  std::size_t row(int num_classes) const;

  friend bool operator==(CondToken, CondToken) = default;

 private:
  explicit CondToken(int id) : id_(id < 0 ? -1 : id) {}
  int id_;
};

std::vector<CondToken> repeat_token(CondToken c, std::size_t n);

/// Number of grids in a batch tensor of shape [B, C, H, W] (or a single [C, H, W]).
std::size_t batch_size(const Tensor& x, const GridShape& grid);

}  // namespace mcm
