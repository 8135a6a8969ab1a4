#include "mcm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mcm/error.hpp"

namespace mcm {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  if (shape_.empty()) throw StructuralError("tensor shape must have rank >= 1");
  for (auto d : shape_) {
    if (d == 0) throw StructuralError("tensor dims must be positive: " + shape_string(shape_));
  }
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw StructuralError("tensor shape must have rank >= 1");
  for (auto d : shape_) {
    if (d == 0) throw StructuralError("tensor dims must be positive: " + shape_string(shape_));
  }
  if (data_.size() != shape_size(shape_)) {
    throw StructuralError("data length " + std::to_string(data_.size()) + " does not match shape " +
                          shape_string(shape_));
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw StructuralError("axis out of range");
  return shape_[axis];
}

std::size_t Tensor::rows() const { return shape_.empty() ? 0 : shape_[0]; }

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

double Tensor::item() const {
  if (data_.size() != 1) throw StructuralError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_size(shape) != data_.size()) {
    throw StructuralError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), std::move(data_));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (begin >= end || end > t.rows()) throw StructuralError("slice_rows out of range");
  Shape shape = t.shape();
  shape[0] = end - begin;
  const std::size_t cols = t.cols();
  std::vector<double> data(t.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                           t.data().begin() + static_cast<std::ptrdiff_t>(end * cols));
  return Tensor(std::move(shape), std::move(data));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw StructuralError("concat_rows of nothing");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  std::vector<double> data;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
      throw StructuralError("concat_rows trailing shape mismatch");
    }
    rows += p.rows();
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  shape[0] = rows;
  return Tensor(std::move(shape), std::move(data));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw StructuralError("max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mcm
