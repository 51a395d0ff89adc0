#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cnl {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 array. The leading dimension is the batch axis
// whenever a tensor carries several samples.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Leading-axis helpers for batched tensors.
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  Shape sample_shape() const;
  std::size_t sample_size() const;
  Tensor row(std::size_t i) const;  // keeps a leading axis of 1
  Tensor rows(std::size_t begin, std::size_t end) const;
  Tensor gather(std::span<const std::size_t> indices) const;
  static Tensor concat(const Tensor& a, const Tensor& b);
  static Tensor concat(std::span<const Tensor> parts);

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Bitwise equality, distinguishing -0.0 from 0.0 and matching NaN payloads.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace cnl
