#pragma once

#include "semsegdepth/core/conv.hpp"
#include "semsegdepth/core/ops.hpp"
#include "semsegdepth/core/params.hpp"

namespace semsegdepth::nn {

/// Number of normalisation groups for `channels`: the largest divisor that is
/// at most 32 and leaves at least four channels per group.
inline int default_groups(int channels) {
  if (channels < 8) return 1;
  for (int g = std::min(32, channels / 4); g >= 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const Scope& scope, int in, int out, int kernel, ConvOptions opt, bool bias = true,
         Init init = Init::he_centered)
      : opt_(opt) {
    const int fan_in = in / opt.groups * kernel * kernel;
    weight_ = scope.param("weight", {out, in / opt.groups, kernel, kernel}, init, fan_in);
    if (opt.stride != 1) scope.store().set_conv_stride(scope.key("weight"), opt.stride);
    if (bias) bias_ = scope.param("bias", {out}, Init::zeros);
  }

  Var operator()(const Var& x) const { return conv2d(x, weight_, bias_, opt_); }

  const Var& weight() const { return weight_; }
  const ConvOptions& options() const { return opt_; }

 private:
  ConvOptions opt_;
  Var weight_;
  Var bias_;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(const Scope& scope, int channels, int groups = 0)
      : groups_(groups > 0 ? groups : default_groups(channels)),
        gamma_(scope.param("weight", {channels}, Init::ones)),
        beta_(scope.param("bias", {channels}, Init::zeros)) {}

  Var operator()(const Var& x) const { return group_norm(x, gamma_, beta_, groups_); }

 private:
  int groups_ = 1;
  Var gamma_;
  Var beta_;
};

/// conv (bias-free) -> group norm -> optional ReLU.
class ConvNormAct {
 public:
  ConvNormAct() = default;
  ConvNormAct(const Scope& scope, int in, int out, int kernel, ConvOptions opt, bool act = true)
      : conv_(scope / "conv", in, out, kernel, opt, false), norm_(scope / "norm", out), act_(act) {}

  Var operator()(const Var& x) const {
    Var y = norm_(conv_(x));
    return act_ ? relu(y) : y;
  }

 private:
  Conv2d conv_;
  GroupNorm norm_;
  bool act_ = true;
};

class Linear {
 public:
  Linear() = default;
  Linear(const Scope& scope, int in, int out, Init init = Init::he_normal)
      : weight_(scope.param("weight", {out, in}, init, in)), bias_(scope.param("bias", {out}, Init::zeros)) {}

  Var operator()(const Var& x) const { return linear(x, weight_, bias_); }

 private:
  Var weight_;
  Var bias_;
};

}  // namespace semsegdepth::nn
