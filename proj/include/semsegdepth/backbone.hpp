#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "semsegdepth/core/layers.hpp"

namespace semsegdepth {

struct BackboneConfig {
  double width_multiplier = 1.0;
  std::array<int, 4> stage_block_counts{3, 4, 6, 3};
  int fpn_channels = 256;

  /// ResNet-50 layout wrapped in a 256-channel FPN.
  static BackboneConfig resnet50() { return {}; }

  /// Desk-scale preset: 1/16 width, one block per stage.
  static BackboneConfig micro() { return {0.0625, {1, 1, 1, 1}, 16}; }

  void validate() const {
    if (!(width_multiplier > 0.0)) throw ShapeError("backbone width_multiplier must be > 0");
    for (int n : stage_block_counts)
      if (n < 1) throw ShapeError("backbone stage_block_counts must be >= 1");
    if (fpn_channels < 1) throw ShapeError("backbone fpn_channels must be >= 1");
  }

  int stem_channels() const { return std::max(1, static_cast<int>(std::lround(64 * width_multiplier))); }
  int stage_mid_channels(int stage) const {
    return std::max(1, static_cast<int>(std::lround(64 * (1 << stage) * width_multiplier)));
  }
  int stage_out_channels(int stage) const { return 4 * stage_mid_channels(stage); }
};

/// Feature maps at strides 4, 8, 16 and 32 of the (padded) network input.
/// `height`/`width` record the unpadded input extent so heads can crop back.
struct FeaturePyramid {
  nn::Var p4, p8, p16, p32;
  int height = 0;
  int width = 0;

  std::array<nn::Var, 4> levels() const { return {p4, p8, p16, p32}; }
};

inline constexpr int kPyramidStride = 32;

/// Reflect-pads a C x H x W input at the bottom/right up to multiples of 32.
inline nn::Var pad_to_stride(const nn::Var& x, int stride = kPyramidStride) {
  const int h = x.dim(1), w = x.dim(2);
  const int ph = (stride - h % stride) % stride, pw = (stride - w % stride) % stride;
  return nn::pad_reflect(x, ph, pw);
}

/// 1x1 -> 3x3 (strided) -> 1x1 residual unit with group normalisation.
class Bottleneck {
 public:
  Bottleneck(const nn::Scope& scope, int in, int mid, int out, int stride)
      : reduce_(scope / "conv1", in, mid, 1, {}),
        spatial_(scope / "conv2", mid, mid, 3, nn::ConvOptions::same(3, stride)),
        expand_(scope / "conv3", mid, out, 1, {}, false) {
    if (stride != 1 || in != out) {
      nn::ConvOptions o;
      o.stride = stride;
      shortcut_ = nn::ConvNormAct(scope / "shortcut", in, out, 1, o, false);
      has_shortcut_ = true;
    }
  }

  nn::Var operator()(const nn::Var& x) const {
    nn::Var y = expand_(spatial_(reduce_(x)));
    return nn::relu(nn::add(y, has_shortcut_ ? shortcut_(x) : x));
  }

 private:
  nn::ConvNormAct reduce_, spatial_, expand_;
  nn::ConvNormAct shortcut_;
  bool has_shortcut_ = false;
};

/// Residual feature extractor (stem + four bottleneck stages) with a
/// top-down FPN: lateral 1x1 projections, nearest 2x upsampling, 3x3 smoothing.
class Backbone {
 public:
  Backbone(const nn::Scope& scope, const BackboneConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    nn::ConvOptions stem_opt = nn::ConvOptions::same(7, 2);
    stem_ = nn::ConvNormAct(scope / "stem", 3, cfg.stem_channels(), 7, stem_opt);
    int in = cfg.stem_channels();
    for (int s = 0; s < 4; ++s) {
      const int mid = cfg.stage_mid_channels(s), out = cfg.stage_out_channels(s);
      for (int b = 0; b < cfg.stage_block_counts[s]; ++b) {
        const int stride = (b == 0 && s > 0) ? 2 : 1;
        stages_[s].emplace_back(scope / ("stage" + std::to_string(s + 1)) / std::to_string(b), in, mid, out, stride);
        in = out;
      }
      lateral_[s] = nn::Conv2d(scope / "fpn" / ("lateral" + std::to_string(s + 1)), out, cfg.fpn_channels, 1, {});
      smooth_[s] = nn::Conv2d(scope / "fpn" / ("output" + std::to_string(s + 1)), cfg.fpn_channels, cfg.fpn_channels, 3,
                              nn::ConvOptions::same(3));
    }
  }

  /// rgb: 3 x H x W with H and W multiples of 32.
  FeaturePyramid extract_pyramid(const nn::Var& rgb) const {
    if (rgb.value().ndim() != 3 || rgb.dim(0) != 3) throw ShapeError("backbone expects 3 x H x W input");
    if (rgb.dim(1) % kPyramidStride || rgb.dim(2) % kPyramidStride) {
      throw ShapeError("backbone input " + shape_str(rgb.shape()) + " is not divisible by 32; pad it first");
    }
    nn::Var x = nn::max_pool2d(stem_(rgb), 3, 2, 1);
    std::array<nn::Var, 4> c;
    for (int s = 0; s < 4; ++s) {
      for (const auto& block : stages_[s]) x = block(x);
      c[s] = x;
    }
    std::array<nn::Var, 4> merged;
    merged[3] = lateral_[3](c[3]);
    for (int s = 2; s >= 0; --s) {
      nn::Var lat = lateral_[s](c[s]);
      merged[s] = nn::add(lat, nn::resize_nearest(merged[s + 1], lat.dim(1), lat.dim(2)));
    }
    FeaturePyramid p;
    p.p4 = smooth_[0](merged[0]);
    p.p8 = smooth_[1](merged[1]);
    p.p16 = smooth_[2](merged[2]);
    p.p32 = smooth_[3](merged[3]);
    p.height = rgb.dim(1);
    p.width = rgb.dim(2);
    return p;
  }

  /// Pads to a multiple of 32, extracts, and records the unpadded extent.
  FeaturePyramid extract_padded(const nn::Var& rgb) const {
    FeaturePyramid p = extract_pyramid(pad_to_stride(rgb));
    p.height = rgb.dim(1);
    p.width = rgb.dim(2);
    return p;
  }

  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  nn::ConvNormAct stem_;
  std::array<std::vector<Bottleneck>, 4> stages_;
  std::array<nn::Conv2d, 4> lateral_;
  std::array<nn::Conv2d, 4> smooth_;
};

}  // namespace semsegdepth
