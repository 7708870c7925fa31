#pragma once

// Test-side reference implementations and finite-difference machinery. These
// are deliberately independent of the library code paths they check: plain
// double-precision loops over explicit pixel/class indices.

#include <cmath>
#include <functional>
#include <vector>

#include "carotidseg/rng.hpp"
#include "carotidseg/tensor.hpp"

namespace testref {

using carotidseg::Rng;
using carotidseg::Tensor;

inline Tensor random_tensor(std::vector<std::int64_t> dims, Rng& rng, double lo = 0.0,
                            double hi = 1.0) {
  Tensor t(std::move(dims));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline Tensor random_onehot(std::vector<std::int64_t> dims, Rng& rng) {
  // dims = (N,C,H,W)
  Tensor t(dims, 0.0f);
  std::int64_t N = dims[0], C = dims[1], HW = dims[2] * dims[3];
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < HW; ++i) {
      std::int64_t c = rng.uniform_int(0, C - 1);
      t[(n * C + c) * HW + i] = 1.0f;
    }
  return t;
}

// ---- loss references (double precision, hand-indexed) ----

struct TverskyCounts {
  double tp = 0, fn = 0, fp = 0;
};

inline TverskyCounts tversky_counts(const std::vector<double>& p, const std::vector<double>& g) {
  TverskyCounts c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    c.tp += g[i] * p[i];
    c.fn += g[i] * (1.0 - p[i]);
    c.fp += (1.0 - g[i]) * p[i];
  }
  return c;
}

inline double ref_mti(const std::vector<double>& p, const std::vector<double>& g, double delta,
                      double eps = 1e-7) {
  TverskyCounts c = tversky_counts(p, g);
  double denom = c.tp + delta * c.fn + (1.0 - delta) * c.fp;
  if (denom < eps) denom = eps;
  return c.tp / denom;
}

inline double ref_bce(const std::vector<double>& p, const std::vector<double>& g,
                      double eps = 1e-7) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pc = std::min(1.0 - eps, std::max(eps, p[i]));
    s += g[i] * std::log(pc) + (1.0 - g[i]) * std::log(1.0 - pc);
  }
  return -s / static_cast<double>(p.size());
}

// slices channel c of sample n from an (N,C,H,W) tensor into doubles
inline std::vector<double> channel_of(const Tensor& t, std::int64_t n, std::int64_t c) {
  std::int64_t HW = t.dim(2) * t.dim(3);
  std::vector<double> out(static_cast<std::size_t>(HW));
  for (std::int64_t i = 0; i < HW; ++i)
    out[static_cast<std::size_t>(i)] = t[(n * t.dim(1) + c) * HW + i];
  return out;
}

inline std::vector<double> sample_of(const Tensor& t, std::int64_t n) {
  std::int64_t M = t.numel() / t.dim(0);
  std::vector<double> out(static_cast<std::size_t>(M));
  for (std::int64_t i = 0; i < M; ++i) out[static_cast<std::size_t>(i)] = t[n * M + i];
  return out;
}

inline double ref_loc_supervised(const Tensor& p, const Tensor& g, double lambda, double delta,
                                 double eps = 1e-7) {
  std::int64_t N = p.dim(0);
  double tv = 0.0;
  std::vector<double> pall, gall;
  for (std::int64_t n = 0; n < N; ++n) {
    auto pv = sample_of(p, n);
    auto gv = sample_of(g, n);
    tv += 1.0 - ref_mti(pv, gv, delta, eps);
    pall.insert(pall.end(), pv.begin(), pv.end());
    gall.insert(gall.end(), gv.begin(), gv.end());
  }
  tv /= static_cast<double>(N);
  return lambda * tv + (1.0 - lambda) * ref_bce(pall, gall, eps);
}

inline double ref_asym_focal(const Tensor& p, const Tensor& g, double delta, double vartheta,
                             double eps = 1e-7) {
  std::int64_t N = p.dim(0), C = p.dim(1), HW = p.dim(2) * p.dim(3);
  double rare = 0.0, bg = 0.0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < HW; ++i) {
      for (std::int64_t c = 1; c < C; ++c) {
        double pc = std::min(1.0 - eps, std::max(eps, static_cast<double>(p[(n * C + c) * HW + i])));
        rare += g[(n * C + c) * HW + i] * std::log(pc);
      }
      double pb = std::min(1.0 - eps, std::max(eps, static_cast<double>(p[(n * C) * HW + i])));
      bg += std::pow(1.0 - pb, vartheta) * g[(n * C) * HW + i] * std::log(pb);
    }
  double M = static_cast<double>(N * HW);
  return -delta / M * rare - (1.0 - delta) / M * bg;
}

inline double ref_asym_focal_tversky(const Tensor& p, const Tensor& g, double delta,
                                     double vartheta, double eps = 1e-7) {
  std::int64_t N = p.dim(0), C = p.dim(1);
  double total = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      double one_minus = 1.0 - ref_mti(channel_of(p, n, c), channel_of(g, n, c), delta, eps);
      total += c == 0 ? one_minus : std::pow(one_minus, 1.0 - vartheta);
    }
  }
  return total / static_cast<double>(N);
}

inline double ref_weighted_consistency(const Tensor& ps, const Tensor& pt, const Tensor& w) {
  std::int64_t N = ps.dim(0), M = ps.numel() / N;
  double acc = 0.0;
  int valid = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < M; ++i) {
      double d = static_cast<double>(ps[n * M + i]) - pt[n * M + i];
      num += w[n * M + i] * d * d;
      den += w[n * M + i];
    }
    if (den > 0.0) {
      acc += num / den;
      ++valid;
    }
  }
  return valid > 0 ? acc / valid : 0.0;
}

// ---- finite differences ----

// Central finite difference of f at x, element by element. f must be a pure
// double-precision function of the tensor contents.
inline std::vector<double> fd_gradient(const std::function<double(const Tensor&)>& f, Tensor x,
                                       double h = 1e-4) {
  std::vector<double> grad(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    float keep = x[i];
    x[i] = static_cast<float>(keep + h);
    double fp = f(x);
    x[i] = static_cast<float>(keep - h);
    double fm = f(x);
    x[i] = keep;
    grad[static_cast<std::size_t>(i)] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

inline double max_rel_error(const std::vector<double>& a, const Tensor& b, double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({std::abs(a[i]), std::abs(static_cast<double>(b[static_cast<std::int64_t>(i)])), floor});
    worst = std::max(worst, std::abs(a[i] - b[static_cast<std::int64_t>(i)]) / denom);
  }
  return worst;
}

// ---- naive conv reference ----

inline Tensor ref_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  std::int64_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out({N, Cout, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < Cout; ++co)
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          double acc = b[co];
          for (std::int64_t ci = 0; ci < Cin; ++ci)
            for (std::int64_t ki = 0; ki < kh; ++ki)
              for (std::int64_t kj = 0; kj < kw; ++kj) {
                std::int64_t ih = oh * stride + ki - pad, iw = ow * stride + kj - pad;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += static_cast<double>(x.at(n, ci, ih, iw)) * w.at(co, ci, ki, kj);
              }
          out.at(n, co, oh, ow) = static_cast<float>(acc);
        }
  return out;
}

}  // namespace testref
