#include "cactusnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cactusnet/error.hpp"

namespace cnl {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                     " elements");
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

Shape Tensor::sample_shape() const {
  if (shape_.empty()) return {};
  return Shape(shape_.begin() + 1, shape_.end());
}

std::size_t Tensor::sample_size() const { return shape_.empty() ? 0 : shape_size(sample_shape()); }

Tensor Tensor::row(std::size_t i) const { return rows(i, i + 1); }

Tensor Tensor::rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows()) {
    throw ShapeError("row range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                     shape_str(shape_));
  }
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t stride = sample_size();
  return Tensor(std::move(s), std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                 data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

Tensor Tensor::gather(std::span<const std::size_t> indices) const {
  Shape s = shape_;
  s[0] = indices.size();
  const std::size_t stride = sample_size();
  std::vector<float> out(indices.size() * stride);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= rows()) throw ShapeError("gather index out of range for " + shape_str(shape_));
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[k] * stride), stride,
                out.begin() + static_cast<std::ptrdiff_t>(k * stride));
  }
  return Tensor(std::move(s), std::move(out));
}

Tensor Tensor::concat(const Tensor& a, const Tensor& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.sample_shape() != b.sample_shape()) {
    throw ShapeError("cannot concatenate " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  }
  Shape s = a.shape();
  s[0] += b.rows();
  std::vector<float> out(a.data_);
  out.insert(out.end(), b.data_.begin(), b.data_.end());
  return Tensor(std::move(s), std::move(out));
}

Tensor Tensor::concat(std::span<const Tensor> parts) {
  Tensor out;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    if (!out.empty() && p.sample_shape() != out.sample_shape()) {
      throw ShapeError("cannot concatenate " + shape_str(out.shape()) + " with " + shape_str(p.shape()));
    }
    if (out.empty()) out.shape_ = p.shape_;
    rows += p.rows();
    out.data_.insert(out.data_.end(), p.data_.begin(), p.data_.end());
  }
  if (!out.data_.empty()) out.shape_[0] = rows;
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

}  // namespace cnl
