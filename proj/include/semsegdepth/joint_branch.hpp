#pragma once

#include <vector>

#include "semsegdepth/core/layers.hpp"
#include "semsegdepth/data/image_sample.hpp"

namespace semsegdepth {

struct JointHeadConfig {
  int hidden_channels = 64;
  int hidden_layers = 3;
  double max_range_mm = data::kDefaultMaxRangeMm;
  /// Block the semantic loss from reaching whatever produced the depth input.
  bool stop_depth_gradient = false;

  void validate() const {
    if (hidden_channels < 1) throw ShapeError("joint hidden_channels must be >= 1");
    if (hidden_layers < 0) throw ShapeError("joint hidden_layers must be >= 0");
    if (!(max_range_mm > 0.0)) throw ShapeError("joint max_range_mm must be > 0");
  }
};

/// Refines semantic logits with a dense depth map: concat(logits,
/// depth / max_range) -> 3x3 conv + ReLU stack -> 3x3 conv to num_classes.
class JointHead {
 public:
  JointHead(const nn::Scope& scope, int num_classes, const JointHeadConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const auto same = nn::ConvOptions::same(3);
    int in = num_classes + 1;
    for (int i = 0; i < cfg.hidden_layers; ++i) {
      layers_.emplace_back(scope / ("conv" + std::to_string(i + 1)), in, cfg.hidden_channels, 3, same);
      in = cfg.hidden_channels;
    }
    layers_.emplace_back(scope / ("conv" + std::to_string(cfg.hidden_layers + 1)), in, num_classes, 3, same);
  }

  /// semantic: nc x H x W logits; depth_mm: 1 x H x W.
  nn::Var operator()(const nn::Var& semantic, const nn::Var& depth_mm) const {
    if (depth_mm.value().ndim() != 3 || depth_mm.dim(0) != 1 || depth_mm.dim(1) != semantic.dim(1) ||
        depth_mm.dim(2) != semantic.dim(2)) {
      throw ShapeMismatch("joint head: depth " + shape_str(depth_mm.shape()) + " vs semantic " +
                          shape_str(semantic.shape()));
    }
    const nn::Var depth = cfg_.stop_depth_gradient ? nn::stop_gradient(depth_mm) : depth_mm;
    nn::Var x = nn::concat_channels({semantic, nn::scale(depth, 1.0 / cfg_.max_range_mm)});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i](x);
      if (i + 1 < layers_.size()) x = nn::relu(x);
    }
    return x;
  }

  const JointHeadConfig& config() const { return cfg_; }

 private:
  JointHeadConfig cfg_;
  std::vector<nn::Conv2d> layers_;
};

}  // namespace semsegdepth
