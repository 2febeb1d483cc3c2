#pragma once

#include "semsegdepth/data/image_sample.hpp"

namespace semsegdepth::data {

struct PixelAnchor {
  int row = 0;
  int col = 0;
};

/// Crops every array of the sample to the same h x w window and shifts the
/// principal point by the anchor offset.
inline ImageSample crop_sample(const ImageSample& s, int h, int w, PixelAnchor anchor) {
  const int H = s.height(), W = s.width();
  if (h < 1 || w < 1 || anchor.row < 0 || anchor.col < 0 || anchor.row + h > H || anchor.col + w > W) {
    throw OutOfBounds("crop window " + std::to_string(h) + "x" + std::to_string(w) + " at (" +
                      std::to_string(anchor.row) + ", " + std::to_string(anchor.col) + ") exceeds " +
                      std::to_string(H) + "x" + std::to_string(W));
  }
  auto crop2d = [&](const Tensor& t) {
    if (t.empty()) return Tensor();
    Tensor out({h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out[static_cast<std::size_t>(y) * w + x] = t[static_cast<std::size_t>(y + anchor.row) * W + x + anchor.col];
    return out;
  };
  ImageSample out;
  if (!s.rgb.empty()) {
    out.rgb = Tensor({3, h, w});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.rgb.at(c, y, x) = s.rgb.at(c, y + anchor.row, x + anchor.col);
  }
  out.sparse_depth = crop2d(s.sparse_depth);
  out.dense_depth_gt = crop2d(s.dense_depth_gt);
  if (!s.semantic_gt.empty()) {
    out.semantic_gt = LabelMap(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.semantic_gt.at(y, x) = s.semantic_gt.at(y + anchor.row, x + anchor.col);
  }
  out.intrinsics = s.intrinsics;
  out.intrinsics.cx -= anchor.col;
  out.intrinsics.cy -= anchor.row;
  out.sample_id = s.sample_id;
  return out;
}

}  // namespace semsegdepth::data
