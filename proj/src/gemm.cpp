#include "deepwaste/gemm.hpp"

#include <algorithm>
#include <cstring>
#include <memory>
#include <new>
#include <vector>

#include "deepwaste/errors.hpp"

namespace deepwaste {
namespace {

#if defined(__AVX512F__)
constexpr std::size_t kLanes = 16;
constexpr std::size_t kMr = 12;
#elif defined(__AVX__)
constexpr std::size_t kLanes = 8;
constexpr std::size_t kMr = 6;
#else
constexpr std::size_t kLanes = 4;
constexpr std::size_t kMr = 6;
#endif

typedef float VecF __attribute__((vector_size(kLanes * sizeof(float))));

// Register tile: kMr rows x kNr columns of C live in 2*kMr vector accumulators.
constexpr std::size_t kNr = 2 * kLanes;
// Cache blocks: a kKc x kNr panel of B stays in L1, kMc x kKc of A in L2.
constexpr std::size_t kKc = 256;
constexpr std::size_t kMc = 8 * kMr;
constexpr std::size_t kNc = 128 * kNr;

struct AlignedDelete {
  void operator()(float* p) const { ::operator delete[](p, std::align_val_t{64}); }
};
using AlignedBuffer = std::unique_ptr<float[], AlignedDelete>;

AlignedBuffer make_buffer(std::size_t n) {
  return AlignedBuffer(static_cast<float*>(::operator new[](n * sizeof(float), std::align_val_t{64})));
}

inline VecF load(const float* p) {
  VecF v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void store(float* p, VecF v) { std::memcpy(p, &v, sizeof(v)); }

// A block (mc x kc) -> panels of kMr rows, each stored k-major, zero padded.
void pack_a(ConstMatrixView a, std::size_t i0, std::size_t mc, std::size_t p0, std::size_t kc,
            float* dst) {
  for (std::size_t ip = 0; ip < mc; ip += kMr) {
    const std::size_t rows = std::min(kMr, mc - ip);
    const float* src = a.data + (i0 + ip) * a.stride + p0;
    for (std::size_t p = 0; p < kc; ++p) {
      std::size_t r = 0;
      for (; r < rows; ++r) dst[r] = src[r * a.stride + p];
      for (; r < kMr; ++r) dst[r] = 0.0f;
      dst += kMr;
    }
  }
}

// B block (kc x nc) -> panels of kNr columns, each stored k-major, zero padded.
void pack_b(ConstMatrixView b, std::size_t p0, std::size_t kc, std::size_t j0, std::size_t nc,
            float* dst) {
  for (std::size_t jp = 0; jp < nc; jp += kNr) {
    const std::size_t cols = std::min(kNr, nc - jp);
    for (std::size_t p = 0; p < kc; ++p) {
      const float* src = b.data + (p0 + p) * b.stride + j0 + jp;
      std::memcpy(dst, src, cols * sizeof(float));
      if (cols < kNr) std::memset(dst + cols, 0, (kNr - cols) * sizeof(float));
      dst += kNr;
    }
  }
}

// Bias seeds the accumulators on the first K block: row_bias has one entry
// per tile row, col_bias one per tile column (zero padded to kNr).
void micro_kernel(std::size_t kc, const float* __restrict ap, const float* __restrict bp,
                  float* c, std::size_t ldc, std::size_t rows, std::size_t cols, bool accumulate,
                  bool relu, const float* row_bias, const float* col_bias) {
  VecF acc[kMr][2] = {};
  if (row_bias) {
    float rb[kMr] = {};
    std::copy(row_bias, row_bias + rows, rb);
    for (std::size_t r = 0; r < kMr; ++r) {
      acc[r][0] = rb[r] - VecF{};
      acc[r][1] = acc[r][0];
    }
  } else if (col_bias) {
    const VecF b0 = load(col_bias);
    const VecF b1 = load(col_bias + kLanes);
    for (std::size_t r = 0; r < kMr; ++r) {
      acc[r][0] = b0;
      acc[r][1] = b1;
    }
  }
  for (std::size_t p = 0; p < kc; ++p) {
    const VecF b0 = load(bp);
    const VecF b1 = load(bp + kLanes);
#pragma GCC unroll 12
    for (std::size_t r = 0; r < kMr; ++r) {
      const VecF av = ap[r] - VecF{};
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
    }
    ap += kMr;
    bp += kNr;
  }

  if (accumulate) {
    // constant trip count so acc is never indexed at run time
#pragma GCC unroll 12
    for (std::size_t r = 0; r < kMr; ++r) {
      if (r >= rows) break;
      const float* row = c + r * ldc;
      alignas(64) float part[kNr] = {};
      if (cols < kNr) {
        std::copy(row, row + cols, part);
        row = part;
      }
      acc[r][0] += load(row);
      acc[r][1] += load(row + kLanes);
    }
  }
  if (relu) {
    for (std::size_t r = 0; r < kMr; ++r) {
      acc[r][0] = acc[r][0] > 0.0f ? acc[r][0] : VecF{};
      acc[r][1] = acc[r][1] > 0.0f ? acc[r][1] : VecF{};
    }
  }

  if (rows == kMr && cols == kNr) {
    for (std::size_t r = 0; r < kMr; ++r) {
      store(c + r * ldc, acc[r][0]);
      store(c + r * ldc + kLanes, acc[r][1]);
    }
    return;
  }

  alignas(64) float tile[kMr][kNr];
  for (std::size_t r = 0; r < kMr; ++r) {
    store(tile[r], acc[r][0]);
    store(tile[r] + kLanes, acc[r][1]);
  }
  for (std::size_t r = 0; r < rows; ++r) std::copy(tile[r], tile[r] + cols, c + r * ldc);
}

void fill_bias(MatrixView out, std::span<const float> bias, BiasAxis axis) {
  for (std::size_t m = 0; m < out.rows; ++m) {
    float* row = out.data + m * out.stride;
    if (bias.empty()) {
      std::fill(row, row + out.cols, 0.0f);
    } else if (axis == BiasAxis::kColumn) {
      std::copy(bias.begin(), bias.end(), row);
    } else {
      std::fill(row, row + out.cols, bias[m]);
    }
  }
}

}  // namespace

void gemm_into(ConstMatrixView a, ConstMatrixView b, MatrixView out, std::span<const float> bias,
               BiasAxis bias_axis, Epilogue epilogue) {
  const std::size_t m_total = a.rows;
  const std::size_t n_total = b.cols;
  const std::size_t k_total = a.cols;
  if (b.rows != k_total || out.rows != m_total || out.cols != n_total) {
    throw ShapeError("gemm: cannot multiply " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                     " by " + std::to_string(b.rows) + "x" + std::to_string(b.cols) + " into " +
                     std::to_string(out.rows) + "x" + std::to_string(out.cols));
  }
  const std::size_t bias_len = bias_axis == BiasAxis::kColumn ? n_total : m_total;
  if (!bias.empty() && bias.size() != bias_len) {
    throw ShapeError("gemm: bias has " + std::to_string(bias.size()) + " entries, expected " +
                     std::to_string(bias_len));
  }

  if (k_total == 0) {
    fill_bias(out, bias, bias_axis);
    if (epilogue == Epilogue::kRelu) {
      for (std::size_t m = 0; m < m_total; ++m) {
        float* row = out.data + m * out.stride;
        for (std::size_t j = 0; j < n_total; ++j) row[j] = std::max(row[j], 0.0f);
      }
    }
    return;
  }

  const std::size_t nc_max = std::min(kNc, (n_total + kNr - 1) / kNr * kNr);
  const std::size_t mc_max = std::min(kMc, (m_total + kMr - 1) / kMr * kMr);
  const std::size_t kc_max = std::min(kKc, k_total);
  AlignedBuffer packed_b = make_buffer(kc_max * nc_max);
  AlignedBuffer packed_a = make_buffer(kc_max * mc_max);
  // Column bias padded so the kernel can always read a full kNr strip.
  std::vector<float> col_bias;
  if (!bias.empty() && bias_axis == BiasAxis::kColumn) {
    col_bias.assign(bias.begin(), bias.end());
    col_bias.resize(n_total + kNr, 0.0f);
  }

  for (std::size_t j0 = 0; j0 < n_total; j0 += kNc) {
    const std::size_t nc = std::min(kNc, n_total - j0);
    for (std::size_t p0 = 0; p0 < k_total; p0 += kKc) {
      const std::size_t kc = std::min(kKc, k_total - p0);
      const bool accumulate = p0 > 0;
      const bool last_block = p0 + kc == k_total;
      pack_b(b, p0, kc, j0, nc, packed_b.get());
      for (std::size_t i0 = 0; i0 < m_total; i0 += kMc) {
        const std::size_t mc = std::min(kMc, m_total - i0);
        pack_a(a, i0, mc, p0, kc, packed_a.get());
        for (std::size_t jr = 0; jr < nc; jr += kNr) {
          const float* bp = packed_b.get() + (jr / kNr) * kc * kNr;
          for (std::size_t ir = 0; ir < mc; ir += kMr) {
            const float* ap = packed_a.get() + (ir / kMr) * kc * kMr;
            float* c = out.data + (i0 + ir) * out.stride + j0 + jr;
            const float* row_bias = nullptr;
            const float* cb = nullptr;
            if (!accumulate && !bias.empty()) {
              if (bias_axis == BiasAxis::kRow) {
                row_bias = bias.data() + i0 + ir;
              } else {
                cb = col_bias.data() + j0 + jr;
              }
            }
            micro_kernel(kc, ap, bp, c, out.stride, std::min(kMr, mc - ir), std::min(kNr, nc - jr),
                         accumulate, last_block && epilogue == Epilogue::kRelu, row_bias, cb);
          }
        }
      }
    }
  }
}

Tensor gemm(const Tensor& a, const Tensor& b, const Tensor* bias) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("gemm: shapes " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " do not multiply");
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != b.dim(1))) {
    throw ShapeError("gemm: bias shape " + shape_to_string(bias->shape()) + " does not match " +
                     shape_to_string(b.shape()));
  }
  Tensor out({a.dim(0), b.dim(1)});
  gemm_into(ConstMatrixView(a.raw(), a.dim(0), a.dim(1)), ConstMatrixView(b.raw(), b.dim(0), b.dim(1)),
            MatrixView(out.raw(), out.dim(0), out.dim(1)),
            bias ? bias->data() : std::span<const float>{}, BiasAxis::kColumn);
  return out;
}

}  // namespace deepwaste
