#include "mcm/params.hpp"

#include <algorithm>

#include "binary_io.hpp"
#include "mcm/error.hpp"

namespace mcm {

void ParamSet::add(std::string name, Tensor value) {
  if (index_.count(name)) throw StructuralError("duplicate segment name: " + name);
  index_.emplace(name, segments_.size());
  segments_.push_back({std::move(name), std::move(value)});
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw StructuralError("no segment named " + name);
  return segments_[it->second].value;
}

std::span<double> ParamSet::values(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw StructuralError("no segment named " + name);
  return segments_[it->second].value.data();
}

void ParamSet::assign(const std::string& name, const Tensor& value) {
  auto it = index_.find(name);
  if (it == index_.end()) throw StructuralError("no segment named " + name);
  auto& seg = segments_[it->second].value;
  if (seg.shape() != value.shape()) {
    throw StructuralError("segment " + name + " has shape " + shape_string(seg.shape()) + ", got " +
                          shape_string(value.shape()));
  }
  std::copy(value.data().begin(), value.data().end(), seg.data().begin());
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(segments_.size());
  for (const auto& s : segments_) out.push_back(s.name);
  return out;
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& s : segments_) n += s.value.size();
  return n;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (segments_[i].name != other.segments_[i].name) return false;
    if (segments_[i].value.shape() != other.segments_[i].value.shape()) return false;
  }
  return true;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.segments_.size(); ++i) {
    if (!(a.segments_[i].value == b.segments_[i].value)) return false;
  }
  return true;
}

ParamSet zeros_like(const ParamSet& params) {
  ParamSet out;
  for (const auto& s : params.segments()) out.add(s.name, Tensor::zeros_like(s.value));
  return out;
}

std::vector<std::uint8_t> encode_params(const ParamSet& params) {
  detail::ByteWriter w;
  w.bytes("MCMP");
  w.u32(kParamFormatVersion);
  w.u32(static_cast<std::uint32_t>(params.num_segments()));
  for (const auto& s : params.segments()) {
    w.u32(static_cast<std::uint32_t>(s.name.size()));
    w.bytes(s.name);
    w.u32(static_cast<std::uint32_t>(s.value.rank()));
    for (auto d : s.value.shape()) w.u64(d);
    w.f64s(s.value.data());
  }
  return w.take();
}

ParamSet decode_params(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("MCMP");
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kParamFormatVersion) {
    throw FormatError("unsupported MCMP version " + std::to_string(version), version_at);
  }
  const auto count = r.u32("segment count");
  ParamSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32("name length");
    auto name = r.str(name_len, "segment name");
    const auto rank_at = r.offset();
    const auto rank = r.u32("rank");
    if (rank == 0) throw FormatError("segment rank must be positive", rank_at);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim_at = r.offset();
      const auto dim = r.u64("dims");
      if (dim == 0) throw FormatError("zero dimension", dim_at);
      shape.push_back(static_cast<std::size_t>(dim));
    }
    auto values = r.f64s(shape_size(shape), "segment values");
    if (out.contains(name)) throw FormatError("duplicate segment " + name, r.offset());
    out.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last segment", r.offset());
  return out;
}

void save_params(const ParamSet& params, const std::filesystem::path& path) {
  detail::write_file(path, encode_params(params));
}

ParamSet load_params(const std::filesystem::path& path) { return decode_params(detail::read_file(path)); }

std::uint64_t checksum(const ParamSet& params) { return detail::fnv1a(encode_params(params)); }

}  // namespace mcm
