#include "deepwaste/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "deepwaste/errors.hpp"
#include "deepwaste/gemm.hpp"

namespace deepwaste {
namespace {

void require_nchw(const Tensor& t, const char* op) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(op) + " expects an NxCxHxW tensor, got " + shape_to_string(t.shape()));
  }
}

}  // namespace

void ConvParams::validate() const {
  if (groups == 0 || in_channels == 0 || out_channels == 0) {
    throw ShapeError("conv: channels and groups must be positive");
  }
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("conv: in_channels " + std::to_string(in_channels) + " and out_channels " +
                     std::to_string(out_channels) + " must be divisible by groups " +
                     std::to_string(groups));
  }
  if (kernel.h == 0 || kernel.w == 0 || stride.h == 0 || stride.w == 0 || dilation.h == 0 ||
      dilation.w == 0) {
    throw ShapeError("conv: kernel, stride and dilation must be positive");
  }
  const Shape expected{out_channels, in_channels / groups, kernel.h, kernel.w};
  if (weights.shape() != expected) {
    throw ShapeError("conv: weights shape " + shape_to_string(weights.shape()) + ", expected " +
                     shape_to_string(expected));
  }
  if (bias && bias->shape() != Shape{out_channels}) {
    throw ShapeError("conv: bias shape " + shape_to_string(bias->shape()) + ", expected [" +
                     std::to_string(out_channels) + "]");
  }
}

void BatchNormParams::validate() const {
  const std::size_t c = gamma.size();
  if (c == 0 || beta.size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batchnorm: gamma/beta/mean/var lengths differ");
  }
  if (!(eps >= 0.0f)) throw ShapeError("batchnorm: eps must be non-negative");
  for (float v : running_var) {
    if (!(v >= 0.0f)) throw ShapeError("batchnorm: running_var must be non-negative");
  }
}

Tensor conv2d(const Tensor& input, const ConvParams& p, bool fuse_relu) {
  require_nchw(input, "conv2d");
  p.validate();
  if (input.dim(1) != p.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) + " channels, layer expects " +
                     std::to_string(p.in_channels));
  }
  const std::size_t batch = input.dim(0);
  const std::size_t cin_g = p.in_channels / p.groups;
  const std::size_t cout_g = p.out_channels / p.groups;
  ConvGeometry geo{cin_g, input.dim(2), input.dim(3), p.kernel, p.stride, p.padding, p.dilation};
  const std::size_t out_h = geo.out_height();
  const std::size_t out_w = geo.out_width();
  const std::size_t out_hw = out_h * out_w;
  const std::size_t in_hw = geo.height * geo.width;
  const std::size_t kdim = geo.col_rows();

  const bool pointwise = p.kernel == Extent2{1, 1} && p.stride == Extent2{1, 1} &&
                         p.padding == Extent2{0, 0};
  std::vector<float> columns;
  if (!pointwise) columns.resize(kdim * out_hw);

  Tensor out({batch, p.out_channels, out_h, out_w});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t g = 0; g < p.groups; ++g) {
      const float* image = input.raw() + (n * p.in_channels + g * cin_g) * in_hw;
      const float* b = image;
      if (!pointwise) {
        im2col_into(image, geo, columns.data());
        b = columns.data();
      }
      const std::size_t out_offset = (n * p.out_channels + g * cout_g) * out_hw;
      std::span<const float> bias;
      if (p.bias) bias = p.bias->data().subspan(g * cout_g, cout_g);
      gemm_into(ConstMatrixView(p.weights.raw() + g * cout_g * kdim, cout_g, kdim),
                ConstMatrixView(b, kdim, out_hw),
                MatrixView(out.raw() + out_offset, cout_g, out_hw), bias, BiasAxis::kRow,
                fuse_relu ? Epilogue::kRelu : Epilogue::kNone);
    }
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& input, const ConvParams& p) {
  if (p.groups != p.in_channels || p.groups != p.out_channels) {
    throw ShapeError("depthwise_conv2d: groups (" + std::to_string(p.groups) +
                     ") must equal in_channels and out_channels");
  }
  return conv2d(input, p);
}

void batchnorm_infer_inplace(Tensor& x, const BatchNormParams& p) {
  require_nchw(x, "batchnorm");
  p.validate();
  if (x.dim(1) != p.channels()) {
    throw ShapeError("batchnorm: input has " + std::to_string(x.dim(1)) + " channels, parameters have " +
                     std::to_string(p.channels()));
  }
  const std::size_t channels = x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const auto scale = static_cast<float>(p.gamma[c] / std::sqrt(static_cast<double>(p.running_var[c]) + p.eps));
      const float mean = p.running_mean[c];
      const float beta = p.beta[c];
      float* plane = x.raw() + (n * channels + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) plane[i] = (plane[i] - mean) * scale + beta;
    }
  }
}

Tensor batchnorm_infer(const Tensor& input, const BatchNormParams& p) {
  Tensor out = input;
  batchnorm_infer_inplace(out, p);
  return out;
}

ConvParams fold_batchnorm(const ConvParams& conv, const BatchNormParams& bn) {
  conv.validate();
  bn.validate();
  if (bn.channels() != conv.out_channels) {
    throw ShapeError("fold_batchnorm: batchnorm has " + std::to_string(bn.channels()) +
                     " channels, conv has " + std::to_string(conv.out_channels) + " outputs");
  }
  ConvParams folded = conv;
  const std::size_t per_filter = conv.weights.numel() / conv.out_channels;
  std::vector<float> bias(conv.out_channels);
  for (std::size_t o = 0; o < conv.out_channels; ++o) {
    const double scale = bn.gamma[o] / std::sqrt(static_cast<double>(bn.running_var[o]) + bn.eps);
    float* w = folded.weights.raw() + o * per_filter;
    for (std::size_t i = 0; i < per_filter; ++i) w[i] = static_cast<float>(w[i] * scale);
    const double b = conv.bias ? (*conv.bias)[o] : 0.0;
    bias[o] = static_cast<float>((b - bn.running_mean[o]) * scale + bn.beta[o]);
  }
  folded.bias = Tensor({conv.out_channels}, std::move(bias));
  return folded;
}

void relu_inplace(Tensor& x) {
  for (float& v : x.data()) v = v > 0.0f ? v : 0.0f;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  relu_inplace(out);
  return out;
}

Tensor pool2d(const Tensor& input, const PoolParams& p) {
  require_nchw(input, "pool2d");
  const std::size_t in_h = input.dim(2);
  const std::size_t in_w = input.dim(3);
  const std::size_t out_h = conv_out_extent(in_h, p.kernel.h, p.stride.h, p.padding.h, 1);
  const std::size_t out_w = conv_out_extent(in_w, p.kernel.w, p.stride.w, p.padding.w, 1);
  if (out_h == 0 || out_w == 0) {
    throw ShapeError("pool2d: window does not fit input " + shape_to_string(input.shape()));
  }
  if (p.padding.h >= p.kernel.h || p.padding.w >= p.kernel.w) {
    throw ShapeError("pool2d: padding must be smaller than the window");
  }
  const std::size_t planes = input.dim(0) * input.dim(1);
  const float window = static_cast<float>(p.kernel.h * p.kernel.w);
  Tensor out({input.dim(0), input.dim(1), out_h, out_w});
  for (std::size_t plane = 0; plane < planes; ++plane) {
    const float* src = input.raw() + plane * in_h * in_w;
    float* dst = out.raw() + plane * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        float sum = 0.0f;
        for (std::size_t ki = 0; ki < p.kernel.h; ++ki) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride.h + ki) -
                                    static_cast<std::ptrdiff_t>(p.padding.h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
          for (std::size_t kj = 0; kj < p.kernel.w; ++kj) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride.w + kj) -
                                      static_cast<std::ptrdiff_t>(p.padding.w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
            const float v = src[iy * static_cast<std::ptrdiff_t>(in_w) + ix];
            best = std::max(best, v);
            sum += v;
          }
        }
        dst[oy * out_w + ox] = p.mode == PoolMode::kMax ? best : sum / window;
      }
    }
  }
  return out;
}

Tensor global_avg_pool(const Tensor& input) {
  require_nchw(input, "global_avg_pool");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t hw = input.dim(2) * input.dim(3);
  Tensor out({input.dim(0), input.dim(1)});
  for (std::size_t plane = 0; plane < planes; ++plane) {
    const float* src = input.raw() + plane * hw;
    double sum = 0.0;
    for (std::size_t i = 0; i < hw; ++i) sum += src[i];
    out[plane] = static_cast<float>(sum / static_cast<double>(hw));
  }
  return out;
}

Tensor fully_connected(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (input.rank() != 2 || weights.rank() != 2 || input.dim(1) != weights.dim(0)) {
    throw ShapeError("fully_connected: input " + shape_to_string(input.shape()) + " and weights " +
                     shape_to_string(weights.shape()) + " do not match");
  }
  return gemm(input, weights, &bias);
}

std::vector<float> softmax(std::span<const float> logits) {
  if (logits.empty()) throw InvalidArgument("softmax: empty logits");
  float top = -std::numeric_limits<float>::infinity();
  for (float v : logits) {
    if (std::isnan(v)) throw InvalidArgument("softmax: NaN logit");
    top = std::max(top, v);
  }
  std::vector<double> e(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - top);
    total += e[i];
  }
  std::vector<float> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<float>(e[i] / total);
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects N x K logits, got " + shape_to_string(logits.shape()));
  Tensor out(logits.shape());
  const std::size_t k = logits.dim(1);
  for (std::size_t n = 0; n < logits.dim(0); ++n) {
    const auto row = softmax(logits.data().subspan(n * k, k));
    std::copy(row.begin(), row.end(), out.raw() + n * k);
  }
  return out;
}

void add_inplace(Tensor& acc, const Tensor& other) {
  if (acc.shape() != other.shape()) {
    throw ShapeError("add: " + shape_to_string(acc.shape()) + " vs " + shape_to_string(other.shape()));
  }
  float* dst = acc.raw();
  const float* src = other.raw();
  for (std::size_t i = 0; i < acc.numel(); ++i) dst[i] += src[i];
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  add_inplace(out, b);
  return out;
}

}  // namespace deepwaste
