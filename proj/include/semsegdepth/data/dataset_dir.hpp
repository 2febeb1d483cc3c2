#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "semsegdepth/data/crop.hpp"
#include "semsegdepth/data/sparsify.hpp"
#include "semsegdepth/data/split.hpp"
#include "semsegdepth/data/toy_scene.hpp"
#include "semsegdepth/data/vkitti2.hpp"

// On-disk dataset layout shared by toy and Virtual-KITTI-2-style data:
//
//   <root>/meta.json              classes, colour code, intrinsics
//   <root>/split.txt              [train] / [val] / [test] sections
//   <root>/rgb/<id>.png           8-bit RGB
//   <root>/depth/<id>.png         16-bit, centimetres, 0 = invalid
//   <root>/semantic/<id>.png      colour-coded classes
//   <root>/sparse/<id>.png        optional 16-bit sparse depth, centimetres

namespace semsegdepth::data {

struct DatasetMeta {
  int num_classes = 0;
  Intrinsics intrinsics = kVkitti2Intrinsics;
  ClassMap class_map;
};

inline ClassMap default_class_map(int num_classes) {
  ClassMap m;
  for (int c = 0; c < num_classes; ++c) {
    const auto col = class_color(c);
    m.color_to_class[pack_rgb(col[0], col[1], col[2])] = c;
  }
  m.background_class = 0;
  return m;
}

inline nlohmann::json meta_to_json(const DatasetMeta& m) {
  nlohmann::json classes = nlohmann::json::array();
  std::vector<std::pair<int, std::uint32_t>> by_class;
  for (const auto& [color, cls] : m.class_map.color_to_class) by_class.emplace_back(cls, color);
  std::sort(by_class.begin(), by_class.end());
  for (const auto& [cls, color] : by_class)
    classes.push_back({{"id", cls}, {"color", {(color >> 16) & 0xff, (color >> 8) & 0xff, color & 0xff}}});
  return {{"num_classes", m.num_classes},
          {"background_class", m.class_map.background_class},
          {"classes", classes},
          {"intrinsics", {{"fx", m.intrinsics.fx}, {"fy", m.intrinsics.fy}, {"cx", m.intrinsics.cx}, {"cy", m.intrinsics.cy}}},
          {"depth_unit", "cm"}};
}

inline DatasetMeta meta_from_json(const nlohmann::json& j) {
  DatasetMeta m;
  m.num_classes = j.at("num_classes").get<int>();
  m.class_map.background_class = j.value("background_class", 0);
  for (const auto& c : j.at("classes")) {
    const auto& col = c.at("color");
    m.class_map.color_to_class[pack_rgb(col.at(0).get<std::uint32_t>(), col.at(1).get<std::uint32_t>(),
                                        col.at(2).get<std::uint32_t>())] = c.at("id").get<int>();
  }
  const auto& in = j.at("intrinsics");
  m.intrinsics = {in.at("fx").get<double>(), in.at("fy").get<double>(), in.at("cx").get<double>(),
                  in.at("cy").get<double>()};
  return m;
}

inline void write_meta(const std::filesystem::path& root, const DatasetMeta& m) {
  std::ofstream os(root / "meta.json");
  if (!os) throw IoError("cannot write " + (root / "meta.json").string());
  os << meta_to_json(m).dump(2) << '\n';
}

inline DatasetMeta read_meta(const std::filesystem::path& root) {
  std::ifstream is(root / "meta.json");
  if (!is) throw MissingFile("missing file " + (root / "meta.json").string());
  return meta_from_json(nlohmann::json::parse(is));
}

inline std::uint16_t mm_to_cm16(double mm) {
  return static_cast<std::uint16_t>(std::clamp(std::lround(mm / 10.0), 0L, 65535L));
}

/// Rounds depth to the centimetre grid of the on-disk format.
inline Tensor quantize_to_cm(const Tensor& depth_mm) {
  Tensor out = depth_mm;
  for (double& v : out.values()) v = mm_to_cm16(v) * 10.0;
  return out;
}

inline std::string toy_sample_id(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

/// Toy sample `index` of a dataset seeded by `seed`: depth quantised to whole
/// centimetres, then sparsified with a per-sample seed.
inline ImageSample make_toy_sample(std::size_t index, std::uint64_t seed, int nc, int h, int w, SparsifyConfig sparsify) {
  ImageSample s = generate_toy_scene(mix_seed(seed, index), nc, h, w);
  s.sample_id = toy_sample_id(index);
  s.dense_depth_gt = quantize_to_cm(s.dense_depth_gt);
  sparsify.seed = sparsify_seed(sparsify.seed, s.sample_id);
  s.sparse_depth = sparsify_depth(s.dense_depth_gt, sparsify);
  return s;
}

inline std::vector<ImageSample> make_toy_dataset(std::size_t n, std::uint64_t seed, int nc, int h, int w,
                                                 const SparsifyConfig& sparsify) {
  std::vector<ImageSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_toy_sample(i, seed, nc, h, w, sparsify));
  return out;
}

inline void write_sample(const std::filesystem::path& root, const ImageSample& s) {
  namespace fs = std::filesystem;
  for (const char* sub : {"rgb", "depth", "semantic", "sparse"}) fs::create_directories(root / sub);
  const int h = s.height(), w = s.width();
  const std::size_t hw = static_cast<std::size_t>(h) * w;

  PngImage rgb{w, h, 3, 8, std::vector<std::uint16_t>(hw * 3)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        rgb.samples[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<std::uint16_t>(std::lround(std::clamp(s.rgb.at(c, y, x), 0.0, 1.0) * 255.0));
  write_png(root / "rgb" / (s.sample_id + ".png"), rgb);

  auto depth_png = [&](const Tensor& t) {
    PngImage img{w, h, 1, 16, std::vector<std::uint16_t>(hw)};
    for (std::size_t i = 0; i < hw; ++i) img.samples[i] = mm_to_cm16(t[i]);
    return img;
  };
  write_png(root / "depth" / (s.sample_id + ".png"), depth_png(s.dense_depth_gt));
  if (!s.sparse_depth.empty()) write_png(root / "sparse" / (s.sample_id + ".png"), depth_png(s.sparse_depth));

  PngImage sem{w, h, 3, 8, std::vector<std::uint16_t>(hw * 3)};
  for (std::size_t i = 0; i < hw; ++i) {
    const auto col = class_color(s.semantic_gt.labels[i]);
    for (int c = 0; c < 3; ++c) sem.samples[i * 3 + c] = col[static_cast<std::size_t>(c)];
  }
  write_png(root / "semantic" / (s.sample_id + ".png"), sem);
}

struct ReadSampleResult {
  ImageSample sample;
  std::size_t unknown_color_pixels = 0;
};

/// Loads one sample of a dataset directory. The sparse map comes from
/// sparse/<id>.png when present, otherwise it is left empty.
inline ReadSampleResult read_sample(const std::filesystem::path& root, const std::string& id, const DatasetMeta& meta) {
  auto loaded = load_vkitti2_sample(root / "rgb" / (id + ".png"), root / "depth" / (id + ".png"),
                                    root / "semantic" / (id + ".png"), meta.class_map, meta.intrinsics, id);
  const auto sparse_path = root / "sparse" / (id + ".png");
  if (std::filesystem::exists(sparse_path)) {
    const PngImage sp = read_png(sparse_path);
    const int h = loaded.sample.height(), w = loaded.sample.width();
    if (sp.width != w || sp.height != h || sp.channels != 1) throw ShapeMismatch("sparse map extent differs for " + id);
    loaded.sample.sparse_depth = Tensor({h, w});
    for (std::size_t i = 0; i < loaded.sample.sparse_depth.size(); ++i) loaded.sample.sparse_depth[i] = sp.samples[i] * 10.0;
  }
  return {std::move(loaded.sample), loaded.unknown_color_pixels};
}

}  // namespace semsegdepth::data
