#pragma once

#include <array>
#include <utility>
#include <vector>

#include "semsegdepth/backbone.hpp"

namespace semsegdepth {

/// Depthwise atrous 3x3 followed by a pointwise projection, each with group
/// norm and ReLU.
class SeparableConv {
 public:
  SeparableConv() = default;
  SeparableConv(const nn::Scope& scope, int in, int out, int rate_h, int rate_w)
      : depthwise_(scope / "depthwise", in, in, 3, depthwise_options(in, rate_h, rate_w)),
        pointwise_(scope / "pointwise", in, out, 1, {}) {}

  static nn::ConvOptions depthwise_options(int channels, int rate_h, int rate_w) {
    nn::ConvOptions o;
    o.pad_h = rate_h;
    o.pad_w = rate_w;
    o.dilation_h = rate_h;
    o.dilation_w = rate_w;
    o.groups = channels;
    o.pad_mode = nn::PadMode::replicate;
    return o;
  }

  nn::Var operator()(const nn::Var& x) const { return pointwise_(depthwise_(x)); }

 private:
  nn::ConvNormAct depthwise_, pointwise_;
};

/// Dense prediction cell: five separable atrous branches arranged as a
/// cascade (one off the input, three off the first branch, one off the
/// fourth), concatenated and fused by a 1x1 conv.
class Dpc {
 public:
  static constexpr std::array<std::pair<int, int>, 5> kRates{{{1, 6}, {1, 1}, {6, 21}, {18, 15}, {6, 3}}};

  Dpc() = default;
  Dpc(const nn::Scope& scope, int in, int out) {
    for (std::size_t i = 0; i < kRates.size(); ++i) {
      branches_[i] = SeparableConv(scope / ("branch" + std::to_string(i + 1)), i == 0 ? in : out, out, kRates[i].first,
                                   kRates[i].second);
    }
    fuse_ = nn::ConvNormAct(scope / "fuse", 5 * out, out, 1, {});
  }

  nn::Var operator()(const nn::Var& x) const {
    const nn::Var b1 = branches_[0](x);
    const nn::Var b2 = branches_[1](b1);
    const nn::Var b3 = branches_[2](b1);
    const nn::Var b4 = branches_[3](b1);
    const nn::Var b5 = branches_[4](b4);
    return fuse_(nn::concat_channels({b1, b2, b3, b4, b5}));
  }

 private:
  std::array<SeparableConv, 5> branches_;
  nn::ConvNormAct fuse_;
};

/// Large-scale feature extractor: three 3x3 conv + norm + ReLU layers.
class Lsfe {
 public:
  Lsfe() = default;
  Lsfe(const nn::Scope& scope, int in, int out) {
    for (int i = 0; i < 3; ++i)
      layers_[i] = nn::ConvNormAct(scope / ("conv" + std::to_string(i + 1)), i == 0 ? in : out, out, 3,
                                   nn::ConvOptions::same(3));
  }

  nn::Var operator()(const nn::Var& x) const { return layers_[2](layers_[1](layers_[0](x))); }

 private:
  std::array<nn::ConvNormAct, 3> layers_;
};

/// Mismatch correction: three 3x3 conv layers then bilinear 2x upsampling.
class MismatchCorrection {
 public:
  MismatchCorrection() = default;
  MismatchCorrection(const nn::Scope& scope, int channels) : body_(scope, channels, channels) {}

  nn::Var operator()(const nn::Var& x) const { return nn::upsample_bilinear(body_(x), 2); }

 private:
  Lsfe body_;
};

struct SemanticHeadConfig {
  int channels = 128;

  void validate() const {
    if (channels < 1) throw ShapeError("semantic head channels must be >= 1");
  }
};

/// Per-pixel class logits from an FPN pyramid. Coarse levels go through a DPC,
/// fine levels through an LSFE; a coarse-to-fine chain of mismatch-correction
/// modules merges them, and all four merged maps are upsampled to stride 4,
/// concatenated, classified by a 1x1 conv and upsampled to the input size.
class SemanticHead {
 public:
  SemanticHead(const nn::Scope& scope, int in_channels, int num_classes, const SemanticHeadConfig& cfg)
      : cfg_(cfg), num_classes_(num_classes) {
    cfg.validate();
    if (num_classes < 2) throw ShapeError("semantic head needs at least 2 classes");
    const int c = cfg.channels;
    dpc32_ = Dpc(scope / "dpc32", in_channels, c);
    dpc16_ = Dpc(scope / "dpc16", in_channels, c);
    lsfe8_ = Lsfe(scope / "lsfe8", in_channels, c);
    lsfe4_ = Lsfe(scope / "lsfe4", in_channels, c);
    mc32_ = MismatchCorrection(scope / "mc32", c);
    mc16_ = MismatchCorrection(scope / "mc16", c);
    mc8_ = MismatchCorrection(scope / "mc8", c);
    classifier_ = nn::Conv2d(scope / "classifier", 4 * c, num_classes, 1, {});
  }

  /// Logits num_classes x H x W, cropped to the pyramid's unpadded extent.
  nn::Var operator()(const FeaturePyramid& p) const {
    const nn::Var d32 = dpc32_(p.p32);
    const nn::Var m16 = nn::add(mc32_(d32), dpc16_(p.p16));
    const nn::Var m8 = nn::add(mc16_(m16), lsfe8_(p.p8));
    const nn::Var m4 = nn::add(mc8_(m8), lsfe4_(p.p4));
    const int h4 = m4.dim(1), w4 = m4.dim(2);
    const nn::Var merged = nn::concat_channels(
        {nn::resize_bilinear(d32, h4, w4), nn::resize_bilinear(m16, h4, w4), nn::resize_bilinear(m8, h4, w4), m4});
    const nn::Var logits = nn::upsample_bilinear(classifier_(merged), 4);
    if (logits.dim(1) == p.height && logits.dim(2) == p.width) return logits;
    return nn::crop(logits, 0, 0, p.height, p.width);
  }

  const SemanticHeadConfig& config() const { return cfg_; }
  int num_classes() const { return num_classes_; }

 private:
  SemanticHeadConfig cfg_;
  int num_classes_;
  Dpc dpc32_, dpc16_;
  Lsfe lsfe8_, lsfe4_;
  MismatchCorrection mc32_, mc16_, mc8_;
  nn::Conv2d classifier_;
};

}  // namespace semsegdepth
