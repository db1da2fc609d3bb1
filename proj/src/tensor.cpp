#include "deepwaste/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "deepwaste/errors.hpp"

namespace deepwaste {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void Tensor::validate(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor rank must be >= 1");
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_to_string(shape));
  }
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  validate(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  validate(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_to_string(shape_) + " needs " +
                     std::to_string(shape_numel(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

float& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

float Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  validate(shape);
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

Tensor Tensor::slice_batch(std::size_t n) const {
  if (empty() || n >= shape_[0]) throw ShapeError("batch index out of range");
  const std::size_t per_item = numel() / shape_[0];
  Shape shape = shape_;
  shape[0] = 1;
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(n * per_item);
  return Tensor(std::move(shape), std::vector<float>(first, first + static_cast<std::ptrdiff_t>(per_item)));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: size mismatch");
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  return max_abs_diff(a.data(), b.data());
}

Tensor concat_batch(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no tensors");
  Shape shape = parts.front().shape();
  std::size_t batch = 0;
  std::vector<float> data;
  for (const Tensor& t : parts) {
    if (t.rank() != shape.size() ||
        !std::equal(t.shape().begin() + 1, t.shape().end(), shape.begin() + 1)) {
      throw ShapeError("concat_batch: " + shape_to_string(t.shape()) + " does not stack with " +
                       shape_to_string(shape));
    }
    batch += t.dim(0);
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  shape[0] = batch;
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace deepwaste
