#pragma once

// Plain-loop references, written against the definitions rather than the
// library code. Everything here works on raw vectors in row-major order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

/// Cross-correlation with zero padding, six nested loops (plus the batch).
inline Vec conv2d(const Vec& in, std::size_t n, std::size_t c, std::size_t h, std::size_t w, const Vec& wt,
                  std::size_t f, std::size_t kh, std::size_t kw, const Vec& bias, std::size_t stride, std::size_t pad,
                  std::size_t& oh, std::size_t& ow) {
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  Vec out(n * f * oh * ow);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = bias[o];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += wt[((o * c + ch) * kh + i) * kw + j] *
                       in[((b * c + ch) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
              }
          out[((b * f + o) * oh + y) * ow + x] = acc;
        }
  return out;
}

/// Window scan; the first maximum in row-major order wins.
inline Vec maxpool(const Vec& in, std::size_t nc, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                   std::vector<std::size_t>* argmax = nullptr) {
  const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Vec out(nc * oh * ow);
  if (argmax) argmax->assign(out.size(), 0);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (p * h + y * stride) * w + x * stride;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t at = (p * h + y * stride + i) * w + x * stride + j;
            if (in[at] > in[best]) best = at;
          }
        out[(p * oh + y) * ow + x] = in[best];
        if (argmax) (*argmax)[(p * oh + y) * ow + x] = best;
      }
  return out;
}

/// (1/N) sum_i sum_k (a_ik - b_ik)^2 with N leading rows.
inline double mean_sq_dist(const Vec& a, const Vec& b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(n);
}

/// (1/N) sum over [N,C,h,w] of (m * a)^2 with the [N,1,h,w] mask broadcast over C.
inline double mask_energy(const Vec& a, const Vec& m, std::size_t n, std::size_t c, std::size_t hw) {
  double s = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = m[b * hw + i] * a[(b * c + ch) * hw + i];
        s += v * v;
      }
  return s / static_cast<double>(n);
}

/// Euclidean error of each (sample, joint) pair of [N,J,D] arrays.
inline Vec joint_errors(const Vec& p, const Vec& g, std::size_t d) {
  Vec e(p.size() / d);
  for (std::size_t i = 0; i < e.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += (p[i * d + k] - g[i * d + k]) * (p[i * d + k] - g[i * d + k]);
    e[i] = std::sqrt(s);
  }
  return e;
}

inline double mean(const Vec& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double median(Vec v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline double pck(const Vec& errors, double t) {
  std::size_t hit = 0;
  for (double e : errors) hit += e <= t;
  return static_cast<double>(hit) / static_cast<double>(errors.size());
}

}  // namespace oracle
