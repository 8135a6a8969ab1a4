#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mcm/tensor.hpp"

namespace mcm {

/// Ordered collection of uniquely named tensors. Shapes are fixed at insertion.
class ParamSet {
 public:
  struct Segment {
    std::string name;
    Tensor value;
  };

  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& at(const std::string& name) const;
  /// Mutable element access; the segment's shape cannot change through it.
  std::span<double> values(const std::string& name);
  /// Replaces a segment's values with a tensor of the same shape.
  void assign(const std::string& name, const Tensor& value);

  std::span<const Segment> segments() const noexcept { return segments_; }
  std::span<Segment> mutable_segments() noexcept { return segments_; }
  std::vector<std::string> names() const;
  std::size_t num_segments() const noexcept { return segments_.size(); }
  std::size_t total_size() const;

  /// Same names, order and shapes.
  bool same_layout(const ParamSet& other) const;

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  std::vector<Segment> segments_;
  std::map<std::string, std::size_t> index_;
};

/// A zero-valued copy with the layout of `params`.
ParamSet zeros_like(const ParamSet& params);

// "MCMP" binary format, all integers little-endian:
//   magic "MCMP" | version u32 | segment count u32 |
//   per segment: name length u32, UTF-8 name bytes, rank u32, dims u64 x rank, values f64 x prod(dims)
inline constexpr std::uint32_t kParamFormatVersion = 1;

std::vector<std::uint8_t> encode_params(const ParamSet& params);
ParamSet decode_params(std::span<const std::uint8_t> bytes);
void save_params(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_params(const std::filesystem::path& path);

/// FNV-1a over the encoded bytes; used for reproducibility checks.
std::uint64_t checksum(const ParamSet& params);

}  // namespace mcm
