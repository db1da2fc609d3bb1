#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace deepwaste {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major float tensor. 4-D image tensors use NCHW.
//
// Invariants: rank >= 1, every extent >= 1, numel(shape) == data().size().
// A default-constructed tensor is the "empty" placeholder and has rank 0.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* raw() { return data_.data(); }
  const float* raw() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // NCHW element access; the tensor must be rank 4.
  float& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  // Copy of batch item n (keeps a leading extent of 1).
  Tensor slice_batch(std::size_t n) const;

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static void validate(const Shape& shape);

  Shape shape_;
  std::vector<float> data_;
};

float max_abs_diff(const Tensor& a, const Tensor& b);
float max_abs_diff(std::span<const float> a, std::span<const float> b);

// Stacks rank-4 tensors with batch 1 (or more) along axis 0.
Tensor concat_batch(std::span<const Tensor> parts);

}  // namespace deepwaste
