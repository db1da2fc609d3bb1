#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "deepwaste/im2col.hpp"
#include "deepwaste/tensor.hpp"

namespace deepwaste {

struct ConvParams {
  std::size_t out_channels = 1;
  std::size_t in_channels = 1;
  Extent2 kernel{1, 1};
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  Extent2 dilation{1, 1};
  std::size_t groups = 1;
  Tensor weights;               // O x (C/groups) x kh x kw
  std::optional<Tensor> bias;   // O

  // Throws ShapeError if the fields disagree with each other.
  void validate() const;
};

struct BatchNormParams {
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float eps = 1e-5f;

  std::size_t channels() const { return gamma.size(); }
  void validate() const;
};

enum class PoolMode { kMax, kAvg };

struct PoolParams {
  PoolMode mode = PoolMode::kMax;
  Extent2 kernel{2, 2};
  Extent2 stride{2, 2};
  Extent2 padding{0, 0};
};

// Cross-correlation with zero padding via im2col + gemm, per group. With
// fuse_relu the output is clamped at zero as it is written.
Tensor conv2d(const Tensor& input, const ConvParams& p, bool fuse_relu = false);

// conv2d restricted to groups == in_channels == out_channels.
Tensor depthwise_conv2d(const Tensor& input, const ConvParams& p);

Tensor batchnorm_infer(const Tensor& input, const BatchNormParams& p);
void batchnorm_infer_inplace(Tensor& x, const BatchNormParams& p);

// Returns conv' with conv2d(x, conv') == batchnorm_infer(conv2d(x, conv), bn).
ConvParams fold_batchnorm(const ConvParams& conv, const BatchNormParams& bn);

Tensor relu(const Tensor& input);
void relu_inplace(Tensor& x);

// Padded cells are ignored by max pooling. Average pooling divides by the
// full window, so zero padding counts toward the mean.
Tensor pool2d(const Tensor& input, const PoolParams& p);

// N x C x H x W -> N x C spatial mean.
Tensor global_avg_pool(const Tensor& input);

// input N x F, weights F x K, bias K.
Tensor fully_connected(const Tensor& input, const Tensor& weights, const Tensor& bias);

// Max-subtracted softmax. Throws InvalidArgument on empty or NaN input.
std::vector<float> softmax(std::span<const float> logits);
// Row-wise softmax of an N x K tensor.
Tensor softmax_rows(const Tensor& logits);

// Elementwise sum of equally shaped tensors.
Tensor add(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& acc, const Tensor& other);

}  // namespace deepwaste
