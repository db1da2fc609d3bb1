#include "deepwaste/im2col.hpp"

#include <algorithm>
#include <cstring>

#include "deepwaste/errors.hpp"

namespace deepwaste {

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                            std::size_t dilation) {
  if (kernel == 0 || dilation == 0) return 0;
  const std::size_t span = dilation * (kernel - 1) + 1;
  if (stride == 0 || in + 2 * pad < span) return 0;
  return (in + 2 * pad - span) / stride + 1;
}

std::size_t ConvGeometry::out_height() const {
  const std::size_t h = conv_out_extent(height, kernel.h, stride.h, padding.h, dilation.h);
  if (h == 0) {
    throw ShapeError("convolution output height is non-positive for input height " +
                     std::to_string(height) + ", kernel " + std::to_string(kernel.h));
  }
  return h;
}

std::size_t ConvGeometry::out_width() const {
  const std::size_t w = conv_out_extent(width, kernel.w, stride.w, padding.w, dilation.w);
  if (w == 0) {
    throw ShapeError("convolution output width is non-positive for input width " +
                     std::to_string(width) + ", kernel " + std::to_string(kernel.w));
  }
  return w;
}

void im2col_into(const float* image, const ConvGeometry& geo, float* columns) {
  const std::size_t out_h = geo.out_height();
  const std::size_t out_w = geo.out_width();
  const auto in_h = static_cast<std::ptrdiff_t>(geo.height);
  const auto in_w = static_cast<std::ptrdiff_t>(geo.width);
  const auto sw = static_cast<std::ptrdiff_t>(geo.stride.w);

  float* dst = columns;
  for (std::size_t c = 0; c < geo.channels; ++c) {
    const float* plane = image + c * geo.height * geo.width;
    for (std::size_t ki = 0; ki < geo.kernel.h; ++ki) {
      for (std::size_t kj = 0; kj < geo.kernel.w; ++kj) {
        const auto col_shift = static_cast<std::ptrdiff_t>(kj * geo.dilation.w) -
                               static_cast<std::ptrdiff_t>(geo.padding.w);
        // Output columns whose tap lands inside [0, in_w).
        std::ptrdiff_t ox_lo = 0;
        while (ox_lo < static_cast<std::ptrdiff_t>(out_w) && ox_lo * sw + col_shift < 0) ++ox_lo;
        std::ptrdiff_t ox_hi = static_cast<std::ptrdiff_t>(out_w);
        while (ox_hi > ox_lo && (ox_hi - 1) * sw + col_shift >= in_w) --ox_hi;

        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride.h + ki * geo.dilation.h) -
                                    static_cast<std::ptrdiff_t>(geo.padding.h);
          if (iy < 0 || iy >= in_h) {
            std::memset(dst, 0, out_w * sizeof(float));
          } else {
            const float* src_row = plane + iy * in_w;
            std::fill(dst, dst + ox_lo, 0.0f);
            if (sw == 1) {
              std::memcpy(dst + ox_lo, src_row + ox_lo + col_shift,
                          static_cast<std::size_t>(ox_hi - ox_lo) * sizeof(float));
            } else {
              for (std::ptrdiff_t ox = ox_lo; ox < ox_hi; ++ox) dst[ox] = src_row[ox * sw + col_shift];
            }
            std::fill(dst + ox_hi, dst + out_w, 0.0f);
          }
          dst += out_w;
        }
      }
    }
  }
}

Tensor im2col(const Tensor& input, Extent2 kernel, Extent2 stride, Extent2 padding, Extent2 dilation) {
  if (input.rank() != 4 || input.dim(0) != 1) {
    throw ShapeError("im2col expects a 1xCxHxW tensor, got " + shape_to_string(input.shape()));
  }
  ConvGeometry geo{input.dim(1), input.dim(2), input.dim(3), kernel, stride, padding, dilation};
  Tensor out({geo.col_rows(), geo.out_height() * geo.out_width()});
  im2col_into(input.raw(), geo, out.raw());
  return out;
}

}  // namespace deepwaste
