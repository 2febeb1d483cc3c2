#pragma once

#include <cstdint>
#include <filesystem>
#include <map>

#include "semsegdepth/data/image_sample.hpp"
#include "semsegdepth/data/png_io.hpp"

namespace semsegdepth::data {

inline std::uint32_t pack_rgb(std::uint32_t r, std::uint32_t g, std::uint32_t b) { return (r << 16) | (g << 8) | b; }

/// Colour code of a semantic PNG. Colours missing from the map fall back to
/// `background_class`.
struct ClassMap {
  std::map<std::uint32_t, int> color_to_class;
  int background_class = 0;
};

struct LoadedSample {
  ImageSample sample;
  std::size_t unknown_color_pixels = 0;
};

/// Intrinsics shipped with Virtual KITTI 2 (1242 x 375 frames).
inline constexpr Intrinsics kVkitti2Intrinsics{725.0087, 725.0087, 620.5, 187.0};

/// Reads one Virtual-KITTI-2-style frame: 8/16-bit RGB, 16-bit depth in
/// centimetres (converted to millimetres), colour-coded semantics. Sparse
/// depth is left empty.
inline LoadedSample load_vkitti2_sample(const std::filesystem::path& rgb_path, const std::filesystem::path& depth_path,
                                        const std::filesystem::path& semantic_path, const ClassMap& class_map,
                                        Intrinsics intrinsics = kVkitti2Intrinsics, std::string sample_id = {}) {
  for (const auto* p : {&rgb_path, &depth_path, &semantic_path})
    if (!std::filesystem::exists(*p)) throw MissingFile("missing file " + p->string());

  const PngImage rgb = read_png(rgb_path);
  const PngImage depth = read_png(depth_path);
  const PngImage sem = read_png(semantic_path);
  if (rgb.channels != 3) throw ShapeError("rgb image must have 3 channels: " + rgb_path.string());
  if (depth.channels != 1) throw ShapeError("depth image must be single-channel: " + depth_path.string());
  if (sem.channels != 3) throw ShapeError("semantic image must be colour-coded RGB: " + semantic_path.string());
  const int h = rgb.height, w = rgb.width;
  if (depth.height != h || depth.width != w || sem.height != h || sem.width != w)
    throw ShapeMismatch("rgb/depth/semantic extents differ for " + rgb_path.string());

  LoadedSample out;
  ImageSample& s = out.sample;
  s.sample_id = sample_id.empty() ? rgb_path.stem().string() : std::move(sample_id);
  s.intrinsics = intrinsics;
  s.rgb = Tensor({3, h, w});
  const double rgb_scale = rgb.bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) s.rgb.at(c, y, x) = rgb.at(y, x, c) / rgb_scale;
  s.dense_depth_gt = Tensor({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) s.dense_depth_gt[static_cast<std::size_t>(y) * w + x] = depth.at(y, x, 0) * 10.0;
  s.semantic_gt = LabelMap(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto key = pack_rgb(sem.at(y, x, 0), sem.at(y, x, 1), sem.at(y, x, 2));
      auto it = class_map.color_to_class.find(key);
      if (it == class_map.color_to_class.end()) {
        s.semantic_gt.at(y, x) = class_map.background_class;
        ++out.unknown_color_pixels;
      } else {
        s.semantic_gt.at(y, x) = it->second;
      }
    }
  return out;
}

}  // namespace semsegdepth::data
