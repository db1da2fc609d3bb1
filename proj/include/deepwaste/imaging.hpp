#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deepwaste/model.hpp"
#include "deepwaste/random.hpp"
#include "deepwaste/tensor.hpp"

namespace deepwaste {

// Interleaved 8-bit RGB, row-major, no padding between rows.
class ImageRGB8 {
 public:
  ImageRGB8() = default;
  ImageRGB8(std::size_t width, std::size_t height, std::uint8_t fill = 0);
  ImageRGB8(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  bool empty() const { return pixels_.empty(); }
  const std::vector<std::uint8_t>& pixels() const { return pixels_; }
  std::uint8_t* raw() { return pixels_.data(); }
  const std::uint8_t* raw() const { return pixels_.data(); }

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels_[(y * width_ + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels_[(y * width_ + x) * 3 + c];
  }

  friend bool operator==(const ImageRGB8&, const ImageRGB8&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

enum class ImageFormat { kPng, kJpeg };

std::string_view format_name(ImageFormat format);
// From leading magic bytes; nullopt if neither PNG nor JPEG.
std::optional<ImageFormat> sniff_format(std::span<const std::uint8_t> bytes);

// Alpha is dropped and grayscale replicated to RGB. Throws DecodeError on
// corrupt or truncated streams, and when the bytes are not in `format`.
ImageRGB8 decode(std::span<const std::uint8_t> bytes, ImageFormat format);
ImageRGB8 decode(std::span<const std::uint8_t> bytes);
ImageRGB8 decode(std::string_view bytes);

std::vector<std::uint8_t> encode_png(const ImageRGB8& img);
std::vector<std::uint8_t> encode_jpeg(const ImageRGB8& img, int quality = 90);

// Half-pixel centres: source coordinate (d + 0.5) * in / out - 0.5, clamped.
ImageRGB8 resize_bilinear(const ImageRGB8& img, std::size_t out_w, std::size_t out_h);

// Throws InvalidArgument when the crop does not fit.
ImageRGB8 crop(const ImageRGB8& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h);
ImageRGB8 center_crop(const ImageRGB8& img, std::size_t w, std::size_t h);

// k quarter turns counter-clockwise; pixel (x, y) lands on (y, W - 1 - x).
ImageRGB8 rotate90(const ImageRGB8& img, int k);
ImageRGB8 flip_horizontal(const ImageRGB8& img);

// Normalized taps of a 1-D Gaussian with radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);
// Separable, clamp-to-edge.
ImageRGB8 gaussian_blur(const ImageRGB8& img, double sigma);

// Resize to the spec, scale to [0, 1], normalize per channel, CHW.
Tensor to_input_tensor(const ImageRGB8& img, const InputSpec& spec);
// Stacks several images into one N x 3 x H x W batch.
Tensor to_input_batch(std::span<const ImageRGB8> images, const InputSpec& spec);

struct AugmentationPolicy {
  std::set<int> rotations{0, 90, 180, 270};  // degrees
  double flip_probability = 0.5;
  double crop_scale_min = 0.8;  // fraction of the shorter side
  double crop_scale_max = 1.0;
  double blur_probability = 0.3;
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 1.5;
  std::size_t output_width = 224;
  std::size_t output_height = 224;
  std::uint64_t seed = 0;

  // Throws InvalidArgument.
  void validate() const;
  // No randomness left: no rotation, no flip, full crop, no blur.
  static AugmentationPolicy identity(std::size_t width, std::size_t height);
};

// Square crop of side scale * min(W, H) at a uniform offset.
ImageRGB8 random_crop(const ImageRGB8& img, const AugmentationPolicy& policy, Rng& rng);

// rotate -> flip -> crop -> resize -> blur, every draw taken from a stream
// keyed by (policy.seed, draw_index).
ImageRGB8 augment(const ImageRGB8& img, const AugmentationPolicy& policy, std::uint64_t draw_index);

}  // namespace deepwaste
