#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "deepwaste/tensor.hpp"

namespace deepwaste {

// Row-major view of a matrix living in someone else's buffer.
struct ConstMatrixView {
  const float* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;  // elements between consecutive rows

  ConstMatrixView() = default;
  ConstMatrixView(const float* d, std::size_t r, std::size_t c)
      : data(d), rows(r), cols(c), stride(c) {}
  ConstMatrixView(const float* d, std::size_t r, std::size_t c, std::size_t s)
      : data(d), rows(r), cols(c), stride(s) {}
};

struct MatrixView {
  float* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;

  MatrixView() = default;
  MatrixView(float* d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c), stride(c) {}
  MatrixView(float* d, std::size_t r, std::size_t c, std::size_t s)
      : data(d), rows(r), cols(c), stride(s) {}
};

enum class BiasAxis {
  kColumn,  // bias[n] added to every row (fully-connected layers)
  kRow,     // bias[m] added to every column (convolution output channels)
};

// Applied to the finished output tile before it is written back.
enum class Epilogue { kNone, kRelu };

// out = a * b (+ bias), overwriting out. Blocked, packed, output-stationary
// kernel with the reduction innermost. An empty bias span means no bias.
void gemm_into(ConstMatrixView a, ConstMatrixView b, MatrixView out,
               std::span<const float> bias = {}, BiasAxis bias_axis = BiasAxis::kColumn,
               Epilogue epilogue = Epilogue::kNone);

// Tensor front end: a is M x K, b is K x N, bias (if given) has N entries.
Tensor gemm(const Tensor& a, const Tensor& b, const Tensor* bias = nullptr);

}  // namespace deepwaste
