#pragma once

// Reference implementations used only by tests. Deliberately naive: no
// blocking, no lowering, straight from the definitions.

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include "deepwaste/random.hpp"
#include "deepwaste/tensor.hpp"

namespace oracle {

using deepwaste::Tensor;

inline Tensor random_tensor(deepwaste::Shape shape, deepwaste::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// M x K times K x N, accumulated in double.
inline Tensor naive_gemm(const Tensor& a, const Tensor& b, const Tensor* bias = nullptr) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = bias ? (*bias)[j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
      out[i * n + j] = static_cast<float>(acc);
    }
  }
  return out;
}

struct DirectConv {
  std::size_t out_channels, kh, kw, sh, sw, ph, pw, dh = 1, dw = 1, groups = 1;
};

// Seven nested loops over (n, o, y, x, c, ki, kj); weights O x C/g x kh x kw.
inline Tensor direct_conv(const Tensor& in, const Tensor& w, const std::vector<float>* bias,
                          const DirectConv& p) {
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::size_t O = p.out_channels;
  const std::size_t cg = C / p.groups, og = O / p.groups;
  const auto Ho = static_cast<std::size_t>((static_cast<long>(H) + 2 * static_cast<long>(p.ph) -
                                            static_cast<long>(p.dh * (p.kh - 1)) - 1) /
                                               static_cast<long>(p.sh) + 1);
  const auto Wo = static_cast<std::size_t>((static_cast<long>(W) + 2 * static_cast<long>(p.pw) -
                                            static_cast<long>(p.dw * (p.kw - 1)) - 1) /
                                               static_cast<long>(p.sw) + 1);
  Tensor out({N, O, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t x = 0; x < Wo; ++x) {
          double acc = bias ? (*bias)[o] : 0.0;
          const std::size_t g = o / og;
          for (std::size_t c = 0; c < cg; ++c)
            for (std::size_t ki = 0; ki < p.kh; ++ki)
              for (std::size_t kj = 0; kj < p.kw; ++kj) {
                const long iy = static_cast<long>(y * p.sh + ki * p.dh) - static_cast<long>(p.ph);
                const long ix = static_cast<long>(x * p.sw + kj * p.dw) - static_cast<long>(p.pw);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                const double xv = in.at(n, g * cg + c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                const double wv = w[((o * cg + c) * p.kh + ki) * p.kw + kj];
                acc += xv * wv;
              }
          out.at(n, o, y, x) = static_cast<float>(acc);
        }
  return out;
}

inline double batchnorm_scalar(double x, double gamma, double beta, double mean, double var, double eps) {
  return gamma * (x - mean) / std::sqrt(var + eps) + beta;
}

// Average precision by counting: the rank of positive i is the number of items
// scored above it plus the tied ones at or before it. Terms are summed in rank
// order so the result can be compared bit for bit.
inline double brute_force_ap(const std::vector<double>& scores, const std::vector<bool>& positives) {
  std::vector<std::pair<std::size_t, double>> terms;  // (rank, precision)
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positives[i]) continue;
    std::size_t rank = 0, pos_at_or_above = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      const bool above = scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
      if (!above) continue;
      ++rank;
      pos_at_or_above += positives[j];
    }
    terms.emplace_back(rank, static_cast<double>(pos_at_or_above) / static_cast<double>(rank));
  }
  std::sort(terms.begin(), terms.end());
  double sum = 0.0;
  for (const auto& t : terms) sum += t.second;
  return sum / static_cast<double>(terms.size());
}

// Mean softmax cross-entropy of W x + b over the rows plus (decay/2)||W||^2,
// written out directly. W is K x F row-major, x is N x F.
inline double head_loss(const std::vector<double>& W, const std::vector<double>& b, const Tensor& x,
                        const std::vector<std::size_t>& labels, double decay) {
  const std::size_t K = b.size(), F = x.dim(1), N = x.dim(0);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> z(K);
    for (std::size_t k = 0; k < K; ++k) {
      z[k] = b[k];
      for (std::size_t f = 0; f < F; ++f) z[k] += W[k * F + f] * x[n * F + f];
    }
    double denom = 0.0;
    for (double v : z) denom += std::exp(v);
    total += -std::log(std::exp(z[labels[n]]) / denom);
  }
  double norm = 0.0;
  for (double w : W) norm += w * w;
  return total / static_cast<double>(N) + 0.5 * decay * norm;
}

// Central differences of head_loss; returns dW followed by db.
inline std::vector<double> numeric_head_gradient(std::vector<double> W, std::vector<double> b, const Tensor& x,
                                                 const std::vector<std::size_t>& labels, double decay,
                                                 double eps = 1e-4) {
  std::vector<double> g;
  for (auto* params : {&W, &b}) {
    for (double& p : *params) {
      const double saved = p;
      p = saved + eps;
      const double up = head_loss(W, b, x, labels, decay);
      p = saved - eps;
      const double down = head_loss(W, b, x, labels, decay);
      p = saved;
      g.push_back((up - down) / (2 * eps));
    }
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||), Euclidean norms.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

}  // namespace oracle
