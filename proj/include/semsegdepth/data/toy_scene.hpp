#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "semsegdepth/core/rng.hpp"
#include "semsegdepth/data/image_sample.hpp"

// Procedural driving-like scenes with analytic ground truth: a camera 1.5 m
// above a textured ground plane, a far backdrop wall, and 1-4 axis-aligned
// boxes standing on the ground. Depth and labels come from exact ray casting.

namespace semsegdepth::data {

struct ToySceneConstants {
  static constexpr double camera_height_m = 1.5;
  static constexpr double wall_depth_m = 60.0;  // beyond the default 50 m sparsifier range
  static constexpr double min_box_depth_m = 4.0;
  static constexpr double max_box_depth_m = 14.0;
  static constexpr double noise_amplitude = 0.03;
};

struct ToyBox {
  double x0, x1, y0, y1, z0, z1;  // camera frame, metres, y pointing down
  int class_id;
  int kind;
};

/// Class layout: with nc >= 3, 0 = backdrop, 1 = ground, 2.. = object kinds;
/// with nc == 2, 0 = backdrop and ground, 1 = objects.
inline int toy_ground_class(int nc) { return nc >= 3 ? 1 : 0; }
inline int toy_first_object_class(int nc) { return nc >= 3 ? 2 : 1; }

/// Distinct display colour per class id (also the semantic PNG colour code).
inline std::array<std::uint8_t, 3> class_color(int class_id) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> base = {{
      {140, 178, 230},  // backdrop
      {115, 107, 102},  // ground
      {204, 51, 51},
      {230, 204, 51},
      {51, 77, 204},
      {51, 178, 77},
      {178, 77, 204},
      {51, 204, 204},
  }};
  if (class_id < static_cast<int>(base.size())) return base[static_cast<std::size_t>(class_id)];
  // deterministic spread for larger class counts
  const std::uint64_t h = splitmix64(static_cast<std::uint64_t>(class_id));
  return {static_cast<std::uint8_t>(40 + h % 200), static_cast<std::uint8_t>(40 + (h >> 8) % 200),
          static_cast<std::uint8_t>(40 + (h >> 16) % 200)};
}

namespace detail {

struct BoxKind {
  double w_lo, w_hi, h_lo, h_hi, l_lo, l_hi;
};

inline const BoxKind& box_kind(int kind) {
  static constexpr std::array<BoxKind, 4> kinds = {{
      {1.8, 2.4, 1.4, 1.8, 3.5, 4.5},  // vehicle
      {0.8, 1.2, 1.7, 2.2, 0.8, 1.2},  // pillar
      {2.4, 3.0, 2.6, 3.4, 5.0, 8.0},  // truck
      {3.0, 5.0, 4.0, 7.0, 3.0, 5.0},  // block
  }};
  return kinds[static_cast<std::size_t>(kind) % kinds.size()];
}

// Slab test for a ray from the origin; returns entry distance and the hit axis.
inline bool ray_box(const std::array<double, 3>& d, const ToyBox& b, double& t_hit, int& axis) {
  const double lo[3] = {b.x0, b.y0, b.z0}, hi[3] = {b.x1, b.y1, b.z1};
  double t_enter = -std::numeric_limits<double>::infinity();
  double t_exit = std::numeric_limits<double>::infinity();
  int enter_axis = 2;
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (0.0 < lo[a] || 0.0 > hi[a]) return false;
      continue;
    }
    double t0 = lo[a] / d[a], t1 = hi[a] / d[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_enter) {
      t_enter = t0;
      enter_axis = a;
    }
    t_exit = std::min(t_exit, t1);
  }
  if (t_enter > t_exit || t_exit <= 0.0 || t_enter <= 0.0) return false;
  t_hit = t_enter;
  axis = enter_axis;
  return true;
}

}  // namespace detail

/// Boxes of the toy scene for `seed` (exposed for tests).
inline std::vector<ToyBox> toy_scene_boxes(std::uint64_t seed, int nc) {
  Rng rng(mix_seed(seed, "toy-scene-boxes"));
  const int n_boxes = rng.uniform_int(1, 4);
  const int first = toy_first_object_class(nc);
  const int n_kinds = nc - first;
  std::vector<ToyBox> boxes;
  for (int i = 0; i < n_boxes; ++i) {
    const int kind = rng.uniform_int(0, n_kinds - 1);
    const auto& k = detail::box_kind(kind);
    const double width = rng.uniform(k.w_lo, k.w_hi);
    const double height = rng.uniform(k.h_lo, k.h_hi);
    const double length = rng.uniform(k.l_lo, k.l_hi);
    const double z0 = rng.uniform(ToySceneConstants::min_box_depth_m, ToySceneConstants::max_box_depth_m);
    const double xc = rng.uniform(-0.4, 0.4) * z0;
    const double ground = ToySceneConstants::camera_height_m;
    boxes.push_back({xc - width / 2, xc + width / 2, ground - height, ground, z0, z0 + length, first + kind, kind});
  }
  return boxes;
}

/// Deterministic procedural scene. Intrinsics are (f = w, f = w, w/2, h/2);
/// sparse depth is left empty (see sparsify_depth).
inline ImageSample generate_toy_scene(std::uint64_t seed, int nc, int h, int w) {
  if (nc < 2) throw ShapeError("generate_toy_scene: nc must be >= 2");
  if (h < 16 || w < 16) throw ShapeError("generate_toy_scene: h and w must be >= 16");
  ImageSample s;
  s.sample_id = "toy_" + std::to_string(seed);
  s.intrinsics = {static_cast<double>(w), static_cast<double>(w), w / 2.0, h / 2.0};
  s.rgb = Tensor({3, h, w});
  s.dense_depth_gt = Tensor({h, w});
  s.semantic_gt = LabelMap(h, w);

  const auto boxes = toy_scene_boxes(seed, nc);
  Rng noise(mix_seed(seed, "toy-scene-noise"));
  const double cam_h = ToySceneConstants::camera_height_m;
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const std::array<double, 3> d = {(u - s.intrinsics.cx) / s.intrinsics.fx, (v - s.intrinsics.cy) / s.intrinsics.fy,
                                       1.0};
      double t = ToySceneConstants::wall_depth_m;
      int cls = 0;
      int surface = 0;  // colour: 0 backdrop, 1 ground, 2 + kind for boxes
      double shade = 1.0;
      bool on_ground = false;
      if (d[1] > 0.0 && cam_h / d[1] < t) {
        t = cam_h / d[1];
        cls = toy_ground_class(nc);
        surface = 1;
        on_ground = true;
      }
      for (const auto& b : boxes) {
        double tb;
        int axis;
        if (detail::ray_box(d, b, tb, axis) && tb < t) {
          t = tb;
          cls = b.class_id;
          surface = 2 + b.kind;
          on_ground = false;
          shade = axis == 2 ? 1.0 : axis == 0 ? 0.75 : 0.9;
        }
      }
      if (on_ground) {
        const double gx = d[0] * t, gz = t;
        const long cell = static_cast<long>(std::floor(gx / 2.0)) + static_cast<long>(std::floor(gz / 2.0));
        shade = (cell & 1) ? 0.85 : 1.0;
      }
      s.dense_depth_gt[static_cast<std::size_t>(v) * w + u] = t * d[2] * 1000.0;
      s.semantic_gt.at(v, u) = cls;
      const auto base = class_color(surface);
      for (int c = 0; c < 3; ++c) {
        const double val = shade * base[static_cast<std::size_t>(c)] / 255.0 +
                           noise.uniform(-ToySceneConstants::noise_amplitude, ToySceneConstants::noise_amplitude);
        s.rgb.at(c, v, u) = std::clamp(val, 0.0, 1.0);
      }
    }
  return s;
}

}  // namespace semsegdepth::data
