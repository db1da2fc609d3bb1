#pragma once

#include <cstddef>

#include "deepwaste/tensor.hpp"

namespace deepwaste {

struct Extent2 {
  std::size_t h = 1;
  std::size_t w = 1;
  friend bool operator==(const Extent2&, const Extent2&) = default;
};

struct ConvGeometry {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  Extent2 kernel{1, 1};
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  Extent2 dilation{1, 1};

  // Throws ShapeError when the output would be empty.
  std::size_t out_height() const;
  std::size_t out_width() const;
  std::size_t col_rows() const { return channels * kernel.h * kernel.w; }
};

// Output extent along one axis, or 0 when the window does not fit.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t pad, std::size_t dilation);

// Lowers one image (channels x height x width, contiguous) into a
// (C*kh*kw) x (Ho*Wo) column matrix. Row index is (c, ki, kj) in that order,
// column index is the output position; out-of-bounds taps read as zero.
void im2col_into(const float* image, const ConvGeometry& geo, float* columns);

// Tensor front end; input must be 1 x C x H x W.
Tensor im2col(const Tensor& input, Extent2 kernel, Extent2 stride, Extent2 padding,
              Extent2 dilation = {1, 1});

}  // namespace deepwaste
