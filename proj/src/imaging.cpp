#include "deepwaste/imaging.hpp"

#include <algorithm>
#include <cmath>

#include "deepwaste/errors.hpp"

namespace deepwaste {

namespace {

std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

void require_nonempty(const ImageRGB8& img, const char* op) {
  if (img.empty()) throw InvalidArgument(std::string(op) + ": empty image");
}

}  // namespace

ImageRGB8::ImageRGB8(std::size_t width, std::size_t height, std::uint8_t fill)
    : ImageRGB8(width, height, std::vector<std::uint8_t>(width * height * 3, fill)) {}

ImageRGB8::ImageRGB8(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels)
    : width_(width), height_(height), pixels_(std::move(pixels)) {
  if (width == 0 || height == 0) throw InvalidArgument("image dimensions must be positive");
  if (pixels_.size() != width * height * 3) {
    throw InvalidArgument("image buffer has " + std::to_string(pixels_.size()) + " bytes, " +
                          std::to_string(width) + "x" + std::to_string(height) + " RGB needs " +
                          std::to_string(width * height * 3));
  }
}

ImageRGB8 resize_bilinear(const ImageRGB8& img, std::size_t out_w, std::size_t out_h) {
  require_nonempty(img, "resize");
  if (out_w == 0 || out_h == 0) throw InvalidArgument("resize: output dimensions must be positive");
  if (out_w == img.width() && out_h == img.height()) return img;

  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
      const double s = std::clamp((static_cast<double>(d) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(s);
      t[d] = {i0, std::min(i0 + 1, in - 1), s - static_cast<double>(i0)};
    }
    return t;
  };
  const auto xs = taps(img.width(), out_w);
  const auto ys = taps(img.height(), out_h);

  ImageRGB8 out(out_w, out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const Tap& ty = ys[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const Tap& tx = xs[x];
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = img.at(tx.i0, ty.i0, c) * (1.0 - tx.f) + img.at(tx.i1, ty.i0, c) * tx.f;
        const double bottom = img.at(tx.i0, ty.i1, c) * (1.0 - tx.f) + img.at(tx.i1, ty.i1, c) * tx.f;
        out.at(x, y, c) = to_u8(top * (1.0 - ty.f) + bottom * ty.f);
      }
    }
  }
  return out;
}

ImageRGB8 crop(const ImageRGB8& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
  require_nonempty(img, "crop");
  if (w == 0 || h == 0 || x0 + w > img.width() || y0 + h > img.height()) {
    throw InvalidArgument("crop " + std::to_string(w) + "x" + std::to_string(h) + " at (" + std::to_string(x0) +
                          ", " + std::to_string(y0) + ") does not fit a " + std::to_string(img.width()) + "x" +
                          std::to_string(img.height()) + " image");
  }
  ImageRGB8 out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    const std::uint8_t* src = img.raw() + ((y0 + y) * img.width() + x0) * 3;
    std::copy(src, src + w * 3, out.raw() + y * w * 3);
  }
  return out;
}

ImageRGB8 center_crop(const ImageRGB8& img, std::size_t w, std::size_t h) {
  require_nonempty(img, "center_crop");
  if (w > img.width() || h > img.height()) {
    throw InvalidArgument("center_crop " + std::to_string(w) + "x" + std::to_string(h) + " larger than " +
                          std::to_string(img.width()) + "x" + std::to_string(img.height()));
  }
  return crop(img, (img.width() - w) / 2, (img.height() - h) / 2, w, h);
}

ImageRGB8 rotate90(const ImageRGB8& img, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0 || img.empty()) return img;
  if (k == 2) {
    // half turn: pixel order reversed
    ImageRGB8 out(img.width(), img.height());
    const std::size_t n = img.width() * img.height();
    for (std::size_t i = 0; i < n; ++i) std::copy_n(img.raw() + i * 3, 3, out.raw() + (n - 1 - i) * 3);
    return out;
  }
  const std::size_t w = img.width(), h = img.height();
  ImageRGB8 out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // k == 1: (x, y) -> (y, W-1-x); k == 3 is the inverse, (x, y) -> (H-1-y, x)
      const std::size_t nx = k == 1 ? y : h - 1 - y;
      const std::size_t ny = k == 1 ? w - 1 - x : x;
      std::copy_n(img.raw() + (y * w + x) * 3, 3, out.raw() + (ny * h + nx) * 3);
    }
  }
  return out;
}

ImageRGB8 flip_horizontal(const ImageRGB8& img) {
  ImageRGB8 out = img;
  const std::size_t w = img.width();
  for (std::size_t y = 0; y < img.height(); ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::copy_n(img.raw() + (y * w + x) * 3, 3, out.raw() + (y * w + (w - 1 - x)) * 3);
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("blur sigma must be positive");
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

ImageRGB8 gaussian_blur(const ImageRGB8& img, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  if (img.empty()) return img;
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto w = static_cast<std::ptrdiff_t>(img.width());
  const auto h = static_cast<std::ptrdiff_t>(img.height());

  // horizontal pass kept in double so rounding happens once
  std::vector<double> tmp(img.pixels().size());
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -r; t <= r; ++t) {
          const std::ptrdiff_t sx = std::clamp<std::ptrdiff_t>(x + t, 0, w - 1);
          acc += k[static_cast<std::size_t>(t + r)] * img.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(y), c);
        }
        tmp[static_cast<std::size_t>((y * w + x) * 3) + c] = acc;
      }
    }
  }
  ImageRGB8 out(img.width(), img.height());
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -r; t <= r; ++t) {
          const std::ptrdiff_t sy = std::clamp<std::ptrdiff_t>(y + t, 0, h - 1);
          acc += k[static_cast<std::size_t>(t + r)] * tmp[static_cast<std::size_t>((sy * w + x) * 3) + c];
        }
        out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = to_u8(acc);
      }
    }
  }
  return out;
}

namespace {

void write_chw(const ImageRGB8& img, const InputSpec& spec, float* dst) {
  const ImageRGB8 sized = resize_bilinear(img, spec.width, spec.height);
  const std::size_t plane = spec.width * spec.height;
  for (std::size_t c = 0; c < 3; ++c) {
    const float mean = spec.mean[c];
    const float inv_std = 1.0f / spec.std[c];
    float* out = dst + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      out[i] = (static_cast<float>(sized.raw()[i * 3 + c]) / 255.0f - mean) * inv_std;
    }
  }
}

}  // namespace

Tensor to_input_tensor(const ImageRGB8& img, const InputSpec& spec) {
  require_nonempty(img, "to_input_tensor");
  if (spec.channels != 3) throw InvalidArgument("input spec must have 3 channels");
  Tensor t({1, 3, spec.height, spec.width});
  write_chw(img, spec, t.raw());
  return t;
}

Tensor to_input_batch(std::span<const ImageRGB8> images, const InputSpec& spec) {
  if (images.empty()) throw InvalidArgument("to_input_batch: no images");
  if (spec.channels != 3) throw InvalidArgument("input spec must have 3 channels");
  Tensor t({images.size(), 3, spec.height, spec.width});
  const std::size_t stride = 3 * spec.height * spec.width;
  for (std::size_t n = 0; n < images.size(); ++n) {
    require_nonempty(images[n], "to_input_batch");
    write_chw(images[n], spec, t.raw() + n * stride);
  }
  return t;
}

void AugmentationPolicy::validate() const {
  if (rotations.empty()) throw InvalidArgument("augmentation needs at least one rotation");
  for (int r : rotations) {
    if (r != 0 && r != 90 && r != 180 && r != 270) {
      throw InvalidArgument("rotation " + std::to_string(r) + " is not a quarter turn");
    }
  }
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument(std::string(what) + " probability must be in [0, 1]");
  };
  prob(flip_probability, "flip");
  prob(blur_probability, "blur");
  if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
    throw InvalidArgument("crop scale range must satisfy 0 < min <= max <= 1");
  }
  if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max)) {
    throw InvalidArgument("blur sigma range must satisfy 0 < min <= max");
  }
  if (output_width == 0 || output_height == 0) throw InvalidArgument("augmentation output size must be positive");
}

AugmentationPolicy AugmentationPolicy::identity(std::size_t width, std::size_t height) {
  AugmentationPolicy p;
  p.rotations = {0};
  p.flip_probability = 0.0;
  p.crop_scale_min = p.crop_scale_max = 1.0;
  p.blur_probability = 0.0;
  p.output_width = width;
  p.output_height = height;
  return p;
}

ImageRGB8 random_crop(const ImageRGB8& img, const AugmentationPolicy& policy, Rng& rng) {
  require_nonempty(img, "random_crop");
  const double scale = rng.uniform(policy.crop_scale_min, policy.crop_scale_max);
  const std::size_t shorter = std::min(img.width(), img.height());
  const std::size_t side = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::floor(scale * static_cast<double>(shorter) + 0.5)), 1, shorter);
  const std::size_t x0 = static_cast<std::size_t>(rng.below(img.width() - side + 1));
  const std::size_t y0 = static_cast<std::size_t>(rng.below(img.height() - side + 1));
  return crop(img, x0, y0, side, side);
}

ImageRGB8 augment(const ImageRGB8& img, const AugmentationPolicy& policy, std::uint64_t draw_index) {
  policy.validate();
  require_nonempty(img, "augment");
  Rng rng = Rng::derive(policy.seed, draw_index);
  // Every draw happens whether or not it is used, so a policy change in one
  // step never shifts the random stream of the next.
  const std::vector<int> choices(policy.rotations.begin(), policy.rotations.end());
  const int degrees = choices[rng.below(choices.size())];
  const bool flip = rng.bernoulli(policy.flip_probability);
  const std::uint64_t crop_seed = rng.next_u64();
  const bool blur = rng.bernoulli(policy.blur_probability);
  const double sigma = rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max);

  ImageRGB8 out = rotate90(img, degrees / 90);
  if (flip) out = flip_horizontal(out);
  Rng crop_rng(crop_seed);
  out = random_crop(out, policy, crop_rng);
  out = resize_bilinear(out, policy.output_width, policy.output_height);
  if (blur) out = gaussian_blur(out, sigma);
  return out;
}

}  // namespace deepwaste
