#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "semsegdepth/core/autograd.hpp"

namespace semsegdepth::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

enum class PadMode {
  zeros,
  replicate,  // out-of-range taps read the nearest edge pixel
};

struct ConvOptions {
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
  int dilation_h = 1;
  int dilation_w = 1;
  int groups = 1;
  PadMode pad_mode = PadMode::zeros;

  /// Padding that preserves spatial size at stride 1 for a k x k kernel.
  static ConvOptions same(int k, int stride = 1, PadMode mode = PadMode::replicate) {
    ConvOptions o;
    o.stride = stride;
    o.pad_h = o.pad_w = k / 2;
    o.pad_mode = mode;
    return o;
  }
};

namespace detail {

struct ConvGeometry {
  int c, h, w;        // input
  int o, kh, kw;      // weight
  int cg, og;         // channels per group
  int ho, wo;         // output
  ConvOptions opt;

  int col_rows() const { return cg * kh * kw; }
  int col_cols() const { return ho * wo; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && opt.stride == 1 && opt.pad_h == 0 && opt.pad_w == 0;
  }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const ConvOptions& opt) {
  if (x.size() != 3 || w.size() != 4) throw ShapeError("conv2d expects C x H x W input and O x C x k x k weight");
  ConvGeometry g{x[0], x[1], x[2], w[0], w[2], w[3], w[1], w[0] / opt.groups, 0, 0, opt};
  if (g.c != g.cg * opt.groups || g.o % opt.groups != 0) {
    throw ShapeMismatch("conv2d: input " + shape_str(x) + " incompatible with weight " + shape_str(w));
  }
  g.ho = (g.h + 2 * opt.pad_h - opt.dilation_h * (g.kh - 1) - 1) / opt.stride + 1;
  g.wo = (g.w + 2 * opt.pad_w - opt.dilation_w * (g.kw - 1) - 1) / opt.stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(x));
  return g;
}

// Source pixel of a tap; -1 when the tap reads zero padding.
inline int tap_source(int pos, int extent, PadMode mode) {
  if (pos >= 0 && pos < extent) return pos;
  if (mode == PadMode::zeros) return -1;
  return std::clamp(pos, 0, extent - 1);
}

inline void im2col(const double* x, const ConvGeometry& g, double* col) {
  const auto& o = g.opt;
  std::vector<int> src_x(static_cast<std::size_t>(g.wo));
  for (int ci = 0; ci < g.cg; ++ci) {
    const double* plane = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        double* row = col + static_cast<std::size_t>((ci * g.kh + ky) * g.kw + kx) * g.ho * g.wo;
        for (int ox = 0; ox < g.wo; ++ox)
          src_x[ox] = tap_source(ox * o.stride - o.pad_w + kx * o.dilation_w, g.w, o.pad_mode);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int sy = tap_source(oy * o.stride - o.pad_h + ky * o.dilation_h, g.h, o.pad_mode);
          double* dst = row + static_cast<std::size_t>(oy) * g.wo;
          if (sy < 0) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(sy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) dst[ox] = src_x[ox] < 0 ? 0.0 : src[src_x[ox]];
        }
      }
  }
}

inline void col2im(const double* col, const ConvGeometry& g, double* dx) {
  const auto& o = g.opt;
  std::vector<int> src_x(static_cast<std::size_t>(g.wo));
  for (int ci = 0; ci < g.cg; ++ci) {
    double* plane = dx + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const double* row = col + static_cast<std::size_t>((ci * g.kh + ky) * g.kw + kx) * g.ho * g.wo;
        for (int ox = 0; ox < g.wo; ++ox)
          src_x[ox] = tap_source(ox * o.stride - o.pad_w + kx * o.dilation_w, g.w, o.pad_mode);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int sy = tap_source(oy * o.stride - o.pad_h + ky * o.dilation_h, g.h, o.pad_mode);
          if (sy < 0) continue;
          const double* src = row + static_cast<std::size_t>(oy) * g.wo;
          double* dst = plane + static_cast<std::size_t>(sy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox)
            if (src_x[ox] >= 0) dst[src_x[ox]] += src[ox];
        }
      }
  }
}

}  // namespace detail

/// 2-D cross-correlation. x: C x H x W, weight: O x (C/groups) x kh x kw,
/// bias: O or undefined.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, const ConvOptions& opt) {
  const auto g = detail::conv_geometry(x.shape(), weight.shape(), opt);
  const std::size_t hw_in = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t hw_out = static_cast<std::size_t>(g.ho) * g.wo;
  const int rows = g.col_rows();
  Tensor out({g.o, g.ho, g.wo});
  std::vector<double> col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(rows) * hw_out);
  for (int grp = 0; grp < opt.groups; ++grp) {
    const double* xin = x.value().data() + grp * g.cg * hw_in;
    const double* colp = xin;
    if (!g.pointwise()) {
      detail::im2col(xin, g, col.data());
      colp = col.data();
    }
    ConstMatrixMap wm(weight.value().data() + static_cast<std::size_t>(grp) * g.og * rows, g.og, rows);
    ConstMatrixMap cm(colp, rows, static_cast<Eigen::Index>(hw_out));
    MatrixMap ym(out.data() + grp * g.og * hw_out, g.og, static_cast<Eigen::Index>(hw_out));
    ym.noalias() = wm * cm;
  }
  if (bias.defined()) {
    for (int oc = 0; oc < g.o; ++oc) {
      double* p = out.data() + oc * hw_out;
      const double b = bias.value()[oc];
      for (std::size_t i = 0; i < hw_out; ++i) p[i] += b;
    }
  }
  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result(std::move(out), std::move(inputs), [g, has_bias, hw_in, hw_out, rows](Node& self) {
    Tensor* gx = input_grad(self, 0);
    Tensor* gw = input_grad(self, 1);
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    std::vector<double> col;
    std::vector<double> dcol;
    if (!g.pointwise()) {
      if (gw) col.resize(static_cast<std::size_t>(rows) * hw_out);
      if (gx) dcol.resize(static_cast<std::size_t>(rows) * hw_out);
    }
    for (int grp = 0; grp < g.opt.groups; ++grp) {
      ConstMatrixMap dy(self.grad.data() + grp * g.og * hw_out, g.og, static_cast<Eigen::Index>(hw_out));
      if (gw) {
        const double* xin = xv.data() + grp * g.cg * hw_in;
        const double* colp = xin;
        if (!g.pointwise()) {
          detail::im2col(xin, g, col.data());
          colp = col.data();
        }
        ConstMatrixMap cm(colp, rows, static_cast<Eigen::Index>(hw_out));
        MatrixMap dw(gw->data() + static_cast<std::size_t>(grp) * g.og * rows, g.og, rows);
        dw.noalias() += dy * cm.transpose();
      }
      if (gx) {
        ConstMatrixMap wm(wv.data() + static_cast<std::size_t>(grp) * g.og * rows, g.og, rows);
        double* dxin = gx->data() + grp * g.cg * hw_in;
        if (g.pointwise()) {
          MatrixMap dxm(dxin, rows, static_cast<Eigen::Index>(hw_out));
          dxm.noalias() += wm.transpose() * dy;
        } else {
          MatrixMap dcm(dcol.data(), rows, static_cast<Eigen::Index>(hw_out));
          dcm.noalias() = wm.transpose() * dy;
          detail::col2im(dcol.data(), g, dxin);
        }
      }
    }
    if (has_bias) {
      if (Tensor* gb = input_grad(self, 2)) {
        for (int oc = 0; oc < g.o; ++oc) {
          const double* p = self.grad.data() + oc * hw_out;
          double s = 0.0;
          for (std::size_t i = 0; i < hw_out; ++i) s += p[i];
          (*gb)[oc] += s;
        }
      }
    }
  });
}

/// Fully connected layer on rows: x K x I, weight O x I, bias O -> K x O.
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  const int k = x.dim(0), in = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != in) throw ShapeMismatch("linear: " + shape_str(x.shape()) + " vs " + shape_str(weight.shape()));
  Tensor out({k, o});
  ConstMatrixMap xm(x.value().data(), k, in);
  ConstMatrixMap wm(weight.value().data(), o, in);
  MatrixMap ym(out.data(), k, o);
  ym.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < o; ++j) out[static_cast<std::size_t>(i) * o + j] += bias.value()[j];
  }
  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result(std::move(out), std::move(inputs), [k, in, o, has_bias](Node& self) {
    ConstMatrixMap dy(self.grad.data(), k, o);
    if (Tensor* gx = input_grad(self, 0)) {
      ConstMatrixMap wm(self.inputs[1]->value.data(), o, in);
      MatrixMap dx(gx->data(), k, in);
      dx.noalias() += dy * wm;
    }
    if (Tensor* gw = input_grad(self, 1)) {
      ConstMatrixMap xm(self.inputs[0]->value.data(), k, in);
      MatrixMap dw(gw->data(), o, in);
      dw.noalias() += dy.transpose() * xm;
    }
    if (has_bias) {
      if (Tensor* gb = input_grad(self, 2)) {
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < o; ++j) (*gb)[j] += self.grad[static_cast<std::size_t>(i) * o + j];
      }
    }
  });
}

/// Max pooling with implicit -inf padding; the first maximum wins ties.
inline Var max_pool2d(const Var& x, int kernel, int stride, int pad) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = (h + 2 * pad - kernel) / stride + 1;
  const int wo = (w + 2 * pad - kernel) / stride + 1;
  Tensor out({c, ho, wo});
  std::vector<int> argmax(out.size());
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            const double v = x.value().at(ch, iy, ix);
            if (v > best) {
              best = v;
              best_idx = (ch * h + iy) * w + ix;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(ch) * ho + oy) * wo + ox;
        out[o] = best;
        argmax[o] = best_idx;
      }
  return make_result(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < argmax.size(); ++i) (*g)[argmax[i]] += self.grad[i];
    }
  });
}

/// Group normalisation of a C x H x W tensor with per-channel affine parameters.
/// Statistics are per sample, so results do not depend on the batch.
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5) {
  const int c = x.dim(0);
  if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const std::size_t hw = x.value().size() / c;
  const int cpg = c / groups;
  const std::size_t n = static_cast<std::size_t>(cpg) * hw;
  Tensor xhat(x.shape());
  Tensor out(x.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(groups));
  for (int g = 0; g < groups; ++g) {
    const double* p = x.value().data() + g * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += p[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[g] = is;
    for (std::size_t i = 0; i < n; ++i) xhat[g * n + i] = (p[i] - mean) * is;
  }
  for (int ch = 0; ch < c; ++ch) {
    const double ga = gamma.value()[ch], be = beta.value()[ch];
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = ga * xhat[ch * hw + i] + be;
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), groups, cpg, hw, n, c](Node& self) {
                       const Tensor& gam = self.inputs[1]->value;
                       if (Tensor* gg = input_grad(self, 1)) {
                         for (int ch = 0; ch < c; ++ch) {
                           double s = 0.0;
                           for (std::size_t i = 0; i < hw; ++i) s += self.grad[ch * hw + i] * xhat[ch * hw + i];
                           (*gg)[ch] += s;
                         }
                       }
                       if (Tensor* gb = input_grad(self, 2)) {
                         for (int ch = 0; ch < c; ++ch) {
                           double s = 0.0;
                           for (std::size_t i = 0; i < hw; ++i) s += self.grad[ch * hw + i];
                           (*gb)[ch] += s;
                         }
                       }
                       if (Tensor* gx = input_grad(self, 0)) {
                         std::vector<double> dxhat(n);
                         for (int g = 0; g < groups; ++g) {
                           double mean_d = 0.0, mean_dx = 0.0;
                           for (int cl = 0; cl < cpg; ++cl) {
                             const int ch = g * cpg + cl;
                             for (std::size_t i = 0; i < hw; ++i) {
                               const std::size_t idx = ch * hw + i;
                               const double d = self.grad[idx] * gam[ch];
                               dxhat[cl * hw + i] = d;
                               mean_d += d;
                               mean_dx += d * xhat[idx];
                             }
                           }
                           mean_d /= static_cast<double>(n);
                           mean_dx /= static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                             const std::size_t idx = g * n + i;
                             (*gx)[idx] += inv_std[g] * (dxhat[i] - mean_d - xhat[idx] * mean_dx);
                           }
                         }
                       }
                     });
}

}  // namespace semsegdepth::nn
