#include "pil/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <string>

#include "pil/errors.hpp"

namespace pil {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require_same_graph(const Var& a, const Var& b) {
  if (&a.graph() != &b.graph()) throw ArgumentError("operands belong to different graphs");
}

#ifndef NDEBUG
void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw ContractViolation(std::string(op) + " produced a non-finite value");
}
#else
void check_finite(const Tensor&, const char*) {}
#endif

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t f, kh, kw;
  std::size_t oh, ow;
  std::size_t stride, pad;

  std::size_t patch() const { return c * kh * kw; }
  std::size_t out_cells() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& in, const Shape& wt, const Shape& bias, std::size_t stride,
                           std::size_t pad) {
  if (in.size() != 4) throw ShapeError("conv2d input must be [N,C,H,W], got " + shape_string(in));
  if (wt.size() != 4) throw ShapeError("conv2d weight must be [F,C,kh,kw], got " + shape_string(wt));
  if (stride == 0) throw ArgumentError("conv2d stride must be >= 1");
  if (wt[1] != in[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(in) + " vs weight " + shape_string(wt));
  }
  if (bias.size() != 1 || bias[0] != wt[0]) {
    throw ShapeError("conv2d bias must be [" + std::to_string(wt[0]) + "], got " + shape_string(bias));
  }
  if (wt[2] > in[2] + 2 * pad || wt[3] > in[3] + 2 * pad) {
    throw ShapeError("conv2d kernel " + shape_string(wt) + " larger than padded input " + shape_string(in));
  }
  ConvGeometry g{};
  g.n = in[0];
  g.c = in[1];
  g.h = in[2];
  g.w = in[3];
  g.f = wt[0];
  g.kh = wt[2];
  g.kw = wt[3];
  g.stride = stride;
  g.pad = pad;
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// Unfolds one sample into a [C*kh*kw, oh*ow] block of a patch matrix whose
// rows are `ld` values apart.
void im2col(const ConvGeometry& g, const double* img, double* cols, std::size_t ld) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - pad;
          double* dst = row + oy * g.ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          if (g.stride == 1) {
            // Shifted row copy: x = ox + j - pad, valid for ox in [lo, hi).
            const auto shift = static_cast<std::ptrdiff_t>(j) - pad;
            const auto ow = static_cast<std::ptrdiff_t>(g.ow);
            const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-shift, 0, ow);
            const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(g.w) - shift, lo, ow);
            std::fill(dst, dst + lo, 0.0);
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + hi, dst + ow, 0.0);
            continue;
          }
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + j) - pad;
            dst[ox] = (x < 0 || x >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[x];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds patch gradients back onto the image.
void col2im(const ConvGeometry& g, const double* cols, std::size_t ld, double* img) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + j) - pad;
            if (x >= 0 && x < static_cast<std::ptrdiff_t>(g.w)) dst[x] += src[ox];
          }
        }
      }
    }
  }
}

// Calls fn(out_index, in_index, weight_index) for every in-bounds tap.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t f = 0; f < g.f; ++f) {
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          const std::size_t out = ((n * g.f + f) * g.oh + oy) * g.ow + ox;
          for (std::size_t c = 0; c < g.c; ++c) {
            for (std::size_t i = 0; i < g.kh; ++i) {
              const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - pad;
              if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t j = 0; j < g.kw; ++j) {
                const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + j) - pad;
                if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.w)) continue;
                const std::size_t in = ((n * g.c + c) * g.h + static_cast<std::size_t>(y)) * g.w +
                                       static_cast<std::size_t>(x);
                const std::size_t wi = ((f * g.c + c) * g.kh + i) * g.kw + j;
                fn(out, in, wi);
              }
            }
          }
        }
      }
    }
  }
}

Tensor conv_forward_direct(const ConvGeometry& g, const Tensor& in, const Tensor& wt, const Tensor& bias) {
  Tensor out({g.n, g.f, g.oh, g.ow});
  auto o = out.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t f = 0; f < g.f; ++f) {
      std::fill_n(o.begin() + static_cast<std::ptrdiff_t>((n * g.f + f) * g.out_cells()), g.out_cells(), bias[f]);
    }
  }
  auto x = in.data();
  auto w = wt.data();
  for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t wi) { o[oi] += w[wi] * x[ii]; });
  return out;
}

// Samples are processed in chunks so each GEMM sees a few hundred columns.
std::size_t chunk_samples(const ConvGeometry& g) {
  constexpr std::size_t kTargetColumns = 512;
  return std::clamp<std::size_t>(kTargetColumns / g.out_cells(), 1, g.n);
}

Tensor conv_forward_patch(const ConvGeometry& g, const Tensor& in, const Tensor& wt, const Tensor& bias) {
  Tensor out({g.n, g.f, g.oh, g.ow});
  const std::size_t chunk = chunk_samples(g);
  const std::size_t cells = g.out_cells();
  Buffer cols(g.patch() * chunk * cells);
  RowMatrix y(static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(chunk * cells));
  ConstMatrixMap weight(wt.data().data(), static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(g.patch()));
  const std::size_t in_stride = g.c * g.h * g.w;
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t count = std::min(chunk, g.n - n0);
    const std::size_t ld = count * cells;
    for (std::size_t k = 0; k < count; ++k) {
      im2col(g, in.data().data() + (n0 + k) * in_stride, cols.data() + k * cells, ld);
    }
    ConstMatrixMap patches(cols.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(ld));
    auto block = y.leftCols(static_cast<Eigen::Index>(ld));
    block.noalias() = weight * patches;
    for (std::size_t k = 0; k < count; ++k) {
      for (std::size_t f = 0; f < g.f; ++f) {
        const double* src = block.data() + f * block.outerStride() + k * cells;
        double* dst = out.data().data() + ((n0 + k) * g.f + f) * cells;
        for (std::size_t p = 0; p < cells; ++p) dst[p] = src[p] + bias[f];
      }
    }
  }
  return out;
}

}  // namespace

Var conv2d(Var input, Var weight, Var bias, std::size_t stride, std::size_t pad, ConvAlgo algo) {
  require_same_graph(input, weight);
  require_same_graph(input, bias);
  const ConvGeometry g = conv_geometry(input.shape(), weight.shape(), bias.shape(), stride, pad);
  Tensor out = algo == ConvAlgo::Direct
                   ? conv_forward_direct(g, input.value(), weight.value(), bias.value())
                   : conv_forward_patch(g, input.value(), weight.value(), bias.value());
  check_finite(out, "conv2d");

  const std::size_t xi = input.id(), wi = weight.id(), bi = bias.id();
  auto backward = [g, xi, wi, bi, algo](Graph& graph, std::span<const double> gy) {
    auto gx = graph.grad_sink(xi);
    auto gw = graph.grad_sink(wi);
    auto gb = graph.grad_sink(bi);
    const auto& x = graph.value(xi).data();
    const auto& w = graph.value(wi).data();
    if (!gb.empty()) {
      for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t f = 0; f < g.f; ++f) {
          const double* row = gy.data() + (n * g.f + f) * g.out_cells();
          double s = 0.0;
          for (std::size_t k = 0; k < g.out_cells(); ++k) s += row[k];
          gb[f] += s;
        }
      }
    }
    if (gx.empty() && gw.empty()) return;
    if (algo == ConvAlgo::Direct) {
      for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t wj) {
        if (!gx.empty()) gx[ii] += w[wj] * gy[oi];
        if (!gw.empty()) gw[wj] += x[ii] * gy[oi];
      });
      return;
    }
    const std::size_t chunk = chunk_samples(g);
    const std::size_t cells = g.out_cells();
    const auto rows = static_cast<Eigen::Index>(g.patch());
    const auto filters = static_cast<Eigen::Index>(g.f);
    Buffer cols(g.patch() * chunk * cells);
    RowMatrix dy(filters, static_cast<Eigen::Index>(chunk * cells));
    ConstMatrixMap weight_m(w.data(), filters, rows);
    const std::size_t in_stride = g.c * g.h * g.w;
    for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::size_t count = std::min(chunk, g.n - n0);
      const std::size_t ld = count * cells;
      const auto width = static_cast<Eigen::Index>(ld);
      for (std::size_t k = 0; k < count; ++k) {
        for (std::size_t f = 0; f < g.f; ++f) {
          const double* src = gy.data() + ((n0 + k) * g.f + f) * cells;
          std::copy(src, src + cells, dy.data() + f * dy.outerStride() + k * cells);
        }
      }
      auto dy_block = dy.leftCols(width);
      if (!gw.empty()) {
        for (std::size_t k = 0; k < count; ++k) {
          im2col(g, x.data() + (n0 + k) * in_stride, cols.data() + k * cells, ld);
        }
        ConstMatrixMap patches(cols.data(), rows, width);
        MatrixMap dw(gw.data(), filters, rows);
        dw.noalias() += dy_block * patches.transpose();
      }
      if (!gx.empty()) {
        MatrixMap dcols(cols.data(), rows, width);
        dcols.noalias() = weight_m.transpose() * dy_block;
        for (std::size_t k = 0; k < count; ++k) {
          col2im(g, cols.data() + k * cells, ld, gx.data() + (n0 + k) * in_stride);
        }
      }
    }
  };
  return input.graph().record(std::move(out), {xi, wi, bi}, std::move(backward));
}

Var maxpool2d(Var input, std::size_t k, std::size_t stride) {
  if (k == 0 || stride == 0) throw ArgumentError("maxpool2d needs positive k and stride");
  const Shape& s = input.shape();
  if (s.size() != 4) throw ShapeError("maxpool2d input must be [N,C,H,W], got " + shape_string(s));
  if (k > s[2] || k > s[3]) throw ShapeError("maxpool2d window larger than input " + shape_string(s));
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Tensor out({s[0], s[1], oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  const auto x = input.value().data();
  auto y = out.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + (oy * stride) * w + ox * stride;
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = p * h * w + (oy * stride + i) * w + ox * stride + j;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        y[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  const std::size_t xi = input.id();
  auto backward = [xi, argmax = std::move(argmax)](Graph& graph, std::span<const double> gy) {
    auto gx = graph.grad_sink(xi);
    for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
  };
  return input.graph().record(std::move(out), {xi}, std::move(backward));
}

Var relu(Var input) {
  Tensor out = input.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t xi = input.id();
  auto backward = [xi](Graph& graph, std::span<const double> gy) {
    auto gx = graph.grad_sink(xi);
    const auto x = graph.value(xi).data();
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (x[i] > 0.0) gx[i] += gy[i];
    }
  };
  return input.graph().record(std::move(out), {xi}, std::move(backward));
}

Var fully_connected(Var input, Var weight, Var bias) {
  require_same_graph(input, weight);
  require_same_graph(input, bias);
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0]) {
    throw ShapeError("fully_connected shape mismatch: " + shape_string(xs) + " x " + shape_string(ws));
  }
  if (bias.shape() != Shape{ws[1]}) {
    throw ShapeError("fully_connected bias must be [" + std::to_string(ws[1]) + "], got " +
                     shape_string(bias.shape()));
  }
  const auto n = static_cast<Eigen::Index>(xs[0]);
  const auto d = static_cast<Eigen::Index>(xs[1]);
  const auto m = static_cast<Eigen::Index>(ws[1]);
  Tensor out({xs[0], ws[1]});
  {
    ConstMatrixMap x(input.value().data().data(), n, d);
    ConstMatrixMap wt(weight.value().data().data(), d, m);
    Eigen::Map<const Eigen::RowVectorXd> b(bias.value().data().data(), m);
    MatrixMap y(out.data().data(), n, m);
    y.noalias() = x * wt;
    y.rowwise() += b;
  }
  check_finite(out, "fully_connected");
  const std::size_t xi = input.id(), wi = weight.id(), bi = bias.id();
  auto backward = [xi, wi, bi, n, d, m](Graph& graph, std::span<const double> gy) {
    ConstMatrixMap dy(gy.data(), n, m);
    if (auto gx = graph.grad_sink(xi); !gx.empty()) {
      ConstMatrixMap wt(graph.value(wi).data().data(), d, m);
      MatrixMap dx(gx.data(), n, d);
      dx.noalias() += dy * wt.transpose();
    }
    if (auto gw = graph.grad_sink(wi); !gw.empty()) {
      ConstMatrixMap x(graph.value(xi).data().data(), n, d);
      MatrixMap dw(gw.data(), d, m);
      dw.noalias() += x.transpose() * dy;
    }
    if (auto gb = graph.grad_sink(bi); !gb.empty()) {
      Eigen::Map<Eigen::RowVectorXd> db(gb.data(), m);
      db += dy.colwise().sum();
    }
  };
  return input.graph().record(std::move(out), {xi, wi, bi}, std::move(backward));
}

Var elementwise_mul(Var a, Var b) {
  require_same_graph(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const bool same = as == bs;
  const bool channel_broadcast =
      !same && as.size() == 4 && bs.size() == 4 && bs[0] == as[0] && bs[1] == 1 && bs[2] == as[2] && bs[3] == as[3];
  if (!same && !channel_broadcast) {
    throw ShapeError("elementwise_mul incompatible shapes " + shape_string(as) + " and " + shape_string(bs));
  }
  const std::size_t channels = channel_broadcast ? as[1] : 1;
  const std::size_t plane = channel_broadcast ? as[2] * as[3] : a.value().numel();
  // Maps a flat index of `a` to the matching index of `b`.
  auto b_index = [=](std::size_t i) {
    if (!channel_broadcast) return i;
    const std::size_t n = i / (channels * plane);
    return n * plane + i % plane;
  };
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[b_index(i)];

  const std::size_t ai = a.id(), bi = b.id();
  auto backward = [ai, bi, b_index](Graph& graph, std::span<const double> gy) {
    if (auto ga = graph.grad_sink(ai); !ga.empty()) {
      const auto bv = graph.value(bi).data();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[b_index(i)];
    }
    if (auto gb = graph.grad_sink(bi); !gb.empty()) {
      const auto av = graph.value(ai).data();
      for (std::size_t i = 0; i < gy.size(); ++i) gb[b_index(i)] += gy[i] * av[i];
    }
  };
  return a.graph().record(std::move(out), {ai, bi}, std::move(backward));
}

Var sum_squares(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  const std::size_t ai = a.id();
  auto backward = [ai](Graph& graph, std::span<const double> gy) {
    auto ga = graph.grad_sink(ai);
    const auto av = graph.value(ai).data();
    const double g = 2.0 * gy[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * av[i];
  };
  return a.graph().record(Tensor::scalar(s), {ai}, std::move(backward));
}

namespace {

Var add_scaled(Var a, Var b, double sign, const char* name) {
  require_same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + " shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += sign * bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  auto backward = [ai, bi, sign](Graph& graph, std::span<const double> gy) {
    if (auto ga = graph.grad_sink(ai); !ga.empty()) {
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (auto gb = graph.grad_sink(bi); !gb.empty()) {
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += sign * gy[i];
    }
  };
  return a.graph().record(std::move(out), {ai, bi}, std::move(backward));
}

}  // namespace

Var add(Var a, Var b) { return add_scaled(a, b, 1.0, "add"); }

Var sub(Var a, Var b) { return add_scaled(a, b, -1.0, "sub"); }

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  const std::size_t ai = a.id();
  auto backward = [ai, factor](Graph& graph, std::span<const double> gy) {
    auto ga = graph.grad_sink(ai);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += factor * gy[i];
  };
  return a.graph().record(std::move(out), {ai}, std::move(backward));
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ai = a.id();
  auto backward = [ai](Graph& graph, std::span<const double> gy) {
    auto ga = graph.grad_sink(ai);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
  };
  return a.graph().record(std::move(out), {ai}, std::move(backward));
}

Var flatten(Var a) {
  const Shape& s = a.shape();
  if (s.empty()) throw ShapeError("flatten needs a batch axis");
  return reshape(a, {s[0], a.value().numel() / s[0]});
}

}  // namespace pil
