#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "semsegdepth/core/autograd.hpp"

// Elementwise, structural and resampling ops on C x H x W (or K x C) tensors.

namespace semsegdepth::nn {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

inline Var add_n(const std::vector<Var>& xs) {
  Var acc = xs.at(0);
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
    }
  });
}

/// Identity in the forward pass; blocks gradient flow.
inline Var stop_gradient(const Var& a) { return Var::constant(a.value()); }

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const Tensor& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (x[i] > 0.0) (*g)[i] += self.grad[i];
      }
    }
  });
}

/// log(1 + exp(x)), evaluated without overflow.
inline double softplus_scalar(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var softplus(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = softplus_scalar(v);
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const Tensor& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * sigmoid_scalar(x[i]);
    }
  });
}

/// Sum of all elements, as a one-element tensor.
inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_result(Tensor({1}, s), {a}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (double& v : g->values()) v += self.grad[0];
    }
  });
}

/// Dot product with a fixed tensor; handy as a scalar readout in gradient checks.
inline Var weighted_sum(const Var& a, const Tensor& weights) {
  if (weights.size() != a.value().size()) throw ShapeMismatch("weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * a.value()[i];
  return make_result(Tensor({1}, s), {a}, [weights](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += weights[i] * self.grad[0];
    }
  });
}

/// Concatenate C x H x W tensors along channels.
inline Var concat_channels(const std::vector<Var>& xs) {
  const int h = xs.at(0).dim(1);
  const int w = xs.at(0).dim(2);
  int c = 0;
  for (const auto& x : xs) {
    if (x.value().ndim() != 3 || x.dim(1) != h || x.dim(2) != w) {
      throw ShapeMismatch("concat_channels: " + shape_str(x.shape()) + " vs spatial " +
                          std::to_string(h) + "x" + std::to_string(w));
    }
    c += x.dim(0);
  }
  Tensor out({c, h, w});
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.value().data(), x.value().data() + x.value().size(), out.data() + off);
    off += x.value().size();
  }
  return make_result(std::move(out), xs, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t n = self.inputs[k]->value.size();
      if (Tensor* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

/// Spatial window [top, top+h) x [left, left+w) of a C x H x W tensor.
inline Var crop(const Var& x, int top, int left, int h, int w) {
  const int c = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (top < 0 || left < 0 || top + h > H || left + w > W) {
    throw OutOfBounds("crop window exceeds " + shape_str(x.shape()));
  }
  if (top == 0 && left == 0 && h == H && w == W) return x;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at(ch, y, xx) = x.value().at(ch, y + top, xx + left);
  return make_result(std::move(out), {x}, [top, left](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const int c = self.grad.dim(0), h = self.grad.dim(1), w = self.grad.dim(2);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) g->at(ch, y + top, xx + left) += self.grad.at(ch, y, xx);
    }
  });
}

/// Mirror index into [0, n) without repeating the edge sample; folds for any offset.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Reflect-pad at the bottom and right edges.
inline Var pad_reflect(const Var& x, int pad_bottom, int pad_right) {
  if (pad_bottom == 0 && pad_right == 0) return x;
  const int c = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int h = H + pad_bottom, w = W + pad_right;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out.at(ch, y, xx) = x.value().at(ch, reflect_index(y, H), reflect_index(xx, W));
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const int c = self.grad.dim(0), h = self.grad.dim(1), w = self.grad.dim(2);
      const int H = g->dim(1), W = g->dim(2);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            g->at(ch, reflect_index(y, H), reflect_index(xx, W)) += self.grad.at(ch, y, xx);
    }
  });
}

namespace detail {
struct LinearTap {
  int i0, i1;
  double w1;  // weight of i1; weight of i0 is 1 - w1
};

// Half-pixel-centre sampling positions (corner pixels not aligned).
inline std::vector<LinearTap> bilinear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}
}  // namespace detail

/// Bilinear resize of a C x H x W tensor to out_h x out_w.
inline Var resize_bilinear(const Var& x, int out_h, int out_w) {
  const int c = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H == out_h && W == out_w) return x;
  auto ty = detail::bilinear_taps(H, out_h);
  auto tx = detail::bilinear_taps(W, out_w);
  Tensor out({c, out_h, out_w});
  const Tensor& in = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (int xx = 0; xx < out_w; ++xx) {
        const auto& b = tx[xx];
        const double top = in.at(ch, a.i0, b.i0) * (1 - b.w1) + in.at(ch, a.i0, b.i1) * b.w1;
        const double bot = in.at(ch, a.i1, b.i0) * (1 - b.w1) + in.at(ch, a.i1, b.i1) * b.w1;
        out.at(ch, y, xx) = top * (1 - a.w1) + bot * a.w1;
      }
    }
  return make_result(std::move(out), {x}, [ty = std::move(ty), tx = std::move(tx)](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const int c = self.grad.dim(0), oh = self.grad.dim(1), ow = self.grad.dim(2);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y) {
          const auto& a = ty[y];
          for (int xx = 0; xx < ow; ++xx) {
            const auto& b = tx[xx];
            const double go = self.grad.at(ch, y, xx);
            g->at(ch, a.i0, b.i0) += go * (1 - a.w1) * (1 - b.w1);
            g->at(ch, a.i0, b.i1) += go * (1 - a.w1) * b.w1;
            g->at(ch, a.i1, b.i0) += go * a.w1 * (1 - b.w1);
            g->at(ch, a.i1, b.i1) += go * a.w1 * b.w1;
          }
        }
    }
  });
}

inline Var upsample_bilinear(const Var& x, int factor) {
  return resize_bilinear(x, x.dim(1) * factor, x.dim(2) * factor);
}

/// Nearest-neighbour resize (integer or non-integer factors).
inline Var resize_nearest(const Var& x, int out_h, int out_w) {
  const int c = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H == out_h && W == out_w) return x;
  std::vector<int> sy(out_h), sx(out_w);
  for (int y = 0; y < out_h; ++y) sy[y] = std::min(H - 1, static_cast<int>(static_cast<long>(y) * H / out_h));
  for (int xx = 0; xx < out_w; ++xx) sx[xx] = std::min(W - 1, static_cast<int>(static_cast<long>(xx) * W / out_w));
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < out_h; ++y)
      for (int xx = 0; xx < out_w; ++xx) out.at(ch, y, xx) = x.value().at(ch, sy[y], sx[xx]);
  return make_result(std::move(out), {x}, [sy = std::move(sy), sx = std::move(sx)](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const int c = self.grad.dim(0), oh = self.grad.dim(1), ow = self.grad.dim(2);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx) g->at(ch, sy[y], sx[xx]) += self.grad.at(ch, y, xx);
    }
  });
}

/// Softmax over the channel axis of a C x H x W tensor.
inline Tensor softmax_channels_value(const Tensor& x) {
  const int c = x.dim(0);
  const std::size_t hw = x.size() / c;
  Tensor out(x.shape());
  for (std::size_t p = 0; p < hw; ++p) {
    double m = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < c; ++k) m = std::max(m, x[k * hw + p]);
    double s = 0.0;
    for (int k = 0; k < c; ++k) s += (out[k * hw + p] = std::exp(x[k * hw + p] - m));
    for (int k = 0; k < c; ++k) out[k * hw + p] /= s;
  }
  return out;
}

inline Var softmax_channels(const Var& x) {
  Tensor out = softmax_channels_value(x.value());
  return make_result(out, {x}, [out](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const int c = out.dim(0);
      const std::size_t hw = out.size() / c;
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (int k = 0; k < c; ++k) dot += self.grad[k * hw + p] * out[k * hw + p];
        for (int k = 0; k < c; ++k) (*g)[k * hw + p] += out[k * hw + p] * (self.grad[k * hw + p] - dot);
      }
    }
  });
}

/// Rows of a C x H x W map at flat pixel indices, as K x C.
inline Var gather_pixels(const Var& x, const std::vector<int>& pixel_index) {
  const int c = x.dim(0);
  const std::size_t hw = x.value().size() / c;
  const int k = static_cast<int>(pixel_index.size());
  Tensor out({k, c});
  for (int i = 0; i < k; ++i)
    for (int ch = 0; ch < c; ++ch) out[static_cast<std::size_t>(i) * c + ch] = x.value()[ch * hw + pixel_index[i]];
  return make_result(std::move(out), {x}, [pixel_index, c, hw](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < pixel_index.size(); ++i)
        for (int ch = 0; ch < c; ++ch) (*g)[ch * hw + pixel_index[i]] += self.grad[i * c + ch];
    }
  });
}

/// Writes K x C rows into a zero C x H x W canvas at flat pixel indices.
inline Var scatter_pixels(const Var& rows, const std::vector<int>& pixel_index, int h, int w) {
  const int k = rows.dim(0), c = rows.dim(1);
  if (static_cast<std::size_t>(k) != pixel_index.size()) throw ShapeMismatch("scatter_pixels: row count");
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out({c, h, w});
  for (int i = 0; i < k; ++i)
    for (int ch = 0; ch < c; ++ch) out[ch * hw + pixel_index[i]] += rows.value()[static_cast<std::size_t>(i) * c + ch];
  return make_result(std::move(out), {rows}, [pixel_index, c, hw](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < pixel_index.size(); ++i)
        for (int ch = 0; ch < c; ++ch) (*g)[i * c + ch] += self.grad[ch * hw + pixel_index[i]];
    }
  });
}

}  // namespace semsegdepth::nn
