#pragma once

#include <string>
#include <vector>

#include "semsegdepth/core/tensor.hpp"

namespace semsegdepth::data {

/// Pinhole intrinsics in pixels.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  bool operator==(const Intrinsics&) const = default;
};

/// Integer class map, row-major H x W.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  bool empty() const { return labels.empty(); }
  int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const LabelMap&) const = default;
};

inline constexpr double kDefaultMaxRangeMm = 50000.0;

/// One training / evaluation record. Depth maps are H x W tensors in
/// millimetres with 0 meaning "no measurement". An empty tensor or label map
/// means the field is absent.
struct ImageSample {
  Tensor rgb;             // 3 x H x W, values in [0, 1]
  Tensor sparse_depth;    // H x W
  Tensor dense_depth_gt;  // H x W
  LabelMap semantic_gt;   // H x W
  Intrinsics intrinsics;
  std::string sample_id;

  int height() const { return rgb.empty() ? semantic_gt.height : rgb.dim(1); }
  int width() const { return rgb.empty() ? semantic_gt.width : rgb.dim(2); }

  bool has_sparse_depth() const {
    for (double v : sparse_depth.values())
      if (v > 0.0) return true;
    return false;
  }
  bool has_dense_depth() const { return !dense_depth_gt.empty(); }
  bool has_semantic() const { return !semantic_gt.empty(); }

  bool operator==(const ImageSample&) const = default;
};

inline std::size_t count_nonzero(const Tensor& t) {
  std::size_t n = 0;
  for (double v : t.values()) n += v != 0.0;
  return n;
}

/// Checks the shared-extent, sparse/dense agreement, range and class-id
/// invariants. Returns an empty string when all hold.
inline std::string check_invariants(const ImageSample& s, int num_classes, double max_range_mm = kDefaultMaxRangeMm) {
  const int h = s.height(), w = s.width();
  auto is_hw = [&](const Tensor& t) { return t.empty() || (t.ndim() == 2 && t.dim(0) == h && t.dim(1) == w); };
  if (!s.rgb.empty() && (s.rgb.ndim() != 3 || s.rgb.dim(0) != 3)) return "rgb must be 3 x H x W";
  if (!is_hw(s.sparse_depth)) return "sparse_depth extent differs from rgb";
  if (!is_hw(s.dense_depth_gt)) return "dense_depth_gt extent differs from rgb";
  if (!s.semantic_gt.empty() && (s.semantic_gt.height != h || s.semantic_gt.width != w))
    return "semantic_gt extent differs from rgb";
  for (std::size_t i = 0; i < s.sparse_depth.size(); ++i) {
    const double v = s.sparse_depth[i];
    if (v == 0.0) continue;
    if (v < 0.0 || v > max_range_mm) return "sparse depth outside (0, max_range]";
    if (s.has_dense_depth() && s.dense_depth_gt[i] != v) return "sparse depth disagrees with dense ground truth";
  }
  for (int l : s.semantic_gt.labels)
    if (l < 0 || l >= num_classes) return "semantic label outside [0, nc)";
  return {};
}

}  // namespace semsegdepth::data
