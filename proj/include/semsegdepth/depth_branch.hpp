#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <queue>
#include <vector>

#include "semsegdepth/core/layers.hpp"
#include "semsegdepth/data/image_sample.hpp"

namespace semsegdepth {

/// Camera-frame points (metres) unprojected from a sparse depth map, each
/// tagged with the flat index v * W + u of its source pixel.
struct PointSet {
  std::vector<std::array<double, 3>> points;
  std::vector<int> pixel_index;

  int size() const { return static_cast<int>(points.size()); }
};

inline PointSet unproject(const Tensor& sparse_mm, const data::Intrinsics& in) {
  if (sparse_mm.ndim() != 2) throw ShapeError("unproject expects an H x W depth map");
  const int h = sparse_mm.dim(0), w = sparse_mm.dim(1);
  PointSet out;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const double d = sparse_mm[static_cast<std::size_t>(v) * w + u];
      if (d <= 0.0) continue;
      const double z = d / 1000.0;
      out.points.push_back({(u - in.cx) * z / in.fx, (v - in.cy) * z / in.fy, z});
      out.pixel_index.push_back(v * w + u);
    }
  }
  if (out.points.empty()) throw EmptySparseDepth("sparse depth map has no valid pixels");
  return out;
}

struct ProjectedPixel {
  int u = 0;
  int v = 0;
  double depth_mm = 0.0;
};

/// Inverse of unproject: pinhole projection rounded to the pixel grid.
inline std::vector<ProjectedPixel> reproject(const PointSet& pts, const data::Intrinsics& in) {
  std::vector<ProjectedPixel> out;
  out.reserve(pts.points.size());
  for (const auto& p : pts.points) {
    out.push_back({static_cast<int>(std::lround(p[0] * in.fx / p[2] + in.cx)),
                   static_cast<int>(std::lround(p[1] * in.fy / p[2] + in.cy)), p[2] * 1000.0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// k nearest neighbours

/// Row i lists the k nearest points of point i (itself included), nearest
/// first. Equal distances are ordered by source pixel index, which keeps the
/// selection independent of the order points are stored in.
struct NeighborTable {
  int k = 0;
  std::vector<int> index;  // size() * k entries

  int size() const { return k ? static_cast<int>(index.size()) / k : 0; }
  const int* row(int i) const { return index.data() + static_cast<std::size_t>(i) * k; }
};

namespace detail {

inline double squared_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  const double dx = b[0] - a[0], dy = b[1] - a[1], dz = b[2] - a[2];
  return dx * dx + dy * dy + dz * dz;
}

struct Candidate {
  double d2;
  int pixel;
  int point;
  bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && pixel < o.pixel); }
};

}  // namespace detail

inline int clamp_k(int k, int n) {
  if (k < 1) throw ShapeError("knn_k must be >= 1");
  return std::min(k, n);
}

inline NeighborTable knn_brute_force(const PointSet& pts, int k) {
  const int n = pts.size();
  NeighborTable t;
  t.k = clamp_k(k, n);
  t.index.resize(static_cast<std::size_t>(n) * t.k);
  std::vector<detail::Candidate> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j)
      all[j] = {detail::squared_distance(pts.points[i], pts.points[j]), pts.pixel_index[j], j};
    std::partial_sort(all.begin(), all.begin() + t.k, all.end());
    for (int j = 0; j < t.k; ++j) t.index[static_cast<std::size_t>(i) * t.k + j] = all[j].point;
  }
  return t;
}

/// Exact k-NN over a uniform grid: rings of cells are scanned outward until
/// no unvisited cell can hold a point closer than the current k-th best.
inline NeighborTable knn_grid(const PointSet& pts, int k) {
  const int n = pts.size();
  NeighborTable t;
  t.k = clamp_k(k, n);
  t.index.resize(static_cast<std::size_t>(n) * t.k);
  if (n == 0) return t;

  std::array<double, 3> lo = pts.points[0], hi = pts.points[0];
  for (const auto& p : pts.points)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  std::array<double, 3> ext{hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]};
  std::sort(ext.begin(), ext.end(), std::greater<>());
  // Aim for about k points per occupied cell whether the cloud is a volume,
  // a surface or a curve.
  const double per = static_cast<double>(t.k) / n;
  double cell = std::max({std::cbrt(ext[0] * ext[1] * ext[2] * per), std::sqrt(ext[0] * ext[1] * per), ext[0] * per});
  if (!(cell > 0.0)) cell = 1.0;
  std::array<int, 3> dims{};
  auto fit = [&] {
    long long total = 1;
    for (int a = 0; a < 3; ++a) {
      dims[a] = static_cast<int>(std::floor((hi[a] - lo[a]) / cell)) + 1;
      total *= dims[a];
    }
    return total;
  };
  while (fit() > 8LL * n + 1024) cell *= 1.5;

  auto cell_of = [&](const std::array<double, 3>& p) {
    std::array<int, 3> c{};
    for (int a = 0; a < 3; ++a) c[a] = std::min(dims[a] - 1, static_cast<int>(std::floor((p[a] - lo[a]) / cell)));
    return c;
  };
  auto flat = [&](int x, int y, int z) { return (static_cast<std::size_t>(x) * dims[1] + y) * dims[2] + z; };

  // CSR buckets
  const std::size_t ncells = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  std::vector<int> start(ncells + 1, 0), members(static_cast<std::size_t>(n));
  std::vector<std::array<int, 3>> cells(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    cells[i] = cell_of(pts.points[i]);
    ++start[flat(cells[i][0], cells[i][1], cells[i][2]) + 1];
  }
  for (std::size_t c = 0; c < ncells; ++c) start[c + 1] += start[c];
  {
    std::vector<int> fill(start.begin(), start.end() - 1);
    for (int i = 0; i < n; ++i) members[fill[flat(cells[i][0], cells[i][1], cells[i][2])]++] = i;
  }

  const int max_ring = std::max({dims[0], dims[1], dims[2]});
  std::priority_queue<detail::Candidate> best;
  for (int i = 0; i < n; ++i) {
    best = {};
    const auto& p = pts.points[i];
    const auto c = cells[i];
    for (int r = 0; r <= max_ring; ++r) {
      for (int x = std::max(0, c[0] - r); x <= std::min(dims[0] - 1, c[0] + r); ++x)
        for (int y = std::max(0, c[1] - r); y <= std::min(dims[1] - 1, c[1] + r); ++y)
          for (int z = std::max(0, c[2] - r); z <= std::min(dims[2] - 1, c[2] + r); ++z) {
            if (std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])}) != r) continue;
            const std::size_t f = flat(x, y, z);
            for (int m = start[f]; m < start[f + 1]; ++m) {
              const int j = members[m];
              const detail::Candidate cand{detail::squared_distance(p, pts.points[j]), pts.pixel_index[j], j};
              if (static_cast<int>(best.size()) < t.k) {
                best.push(cand);
              } else if (cand < best.top()) {
                best.pop();
                best.push(cand);
              }
            }
          }
      // Unvisited points lie at least r cells away; the margin absorbs
      // rounding in the cell assignment.
      const double reach = r * cell * (1.0 - 1e-9);
      if (static_cast<int>(best.size()) == t.k && best.top().d2 < reach * reach) break;
    }
    for (int j = t.k - 1; j >= 0; --j) {
      t.index[static_cast<std::size_t>(i) * t.k + j] = best.top().point;
      best.pop();
    }
  }
  return t;
}

inline constexpr int kBruteForceKnnLimit = 4096;

inline NeighborTable knn(const PointSet& pts, int k) {
  return pts.size() <= kBruteForceKnnLimit ? knn_brute_force(pts, k) : knn_grid(pts, k);
}

// ---------------------------------------------------------------------------
// continuous convolution

/// Maps a 3-D offset to per-channel kernel weights.
class KernelMlp {
 public:
  KernelMlp() = default;
  KernelMlp(const nn::Scope& scope, const std::vector<int>& hidden, int out_channels) {
    int in = 3;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers_.emplace_back(scope / ("fc" + std::to_string(i + 1)), in, hidden[i]);
      in = hidden[i];
    }
    layers_.emplace_back(scope / ("fc" + std::to_string(hidden.size() + 1)), in, out_channels, nn::Init::lecun_normal);
  }

  /// offsets: M x 3 -> M x out_channels
  nn::Var operator()(const nn::Var& offsets) const {
    nn::Var x = offsets;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i](x);
      if (i + 1 < layers_.size()) x = nn::relu(x);
    }
    return x;
  }

 private:
  std::vector<nn::Linear> layers_;
};

/// Offsets p_j - p_i for every (point, neighbour) pair, as (K * k) x 3.
inline Tensor neighbor_offsets(const PointSet& pts, const NeighborTable& nbrs) {
  const int n = nbrs.size(), k = nbrs.k;
  Tensor off({n * k, 3});
  for (int i = 0; i < n; ++i) {
    const int* row = nbrs.row(i);
    for (int j = 0; j < k; ++j)
      for (int a = 0; a < 3; ++a)
        off[(static_cast<std::size_t>(i) * k + j) * 3 + a] = pts.points[row[j]][a] - pts.points[i][a];
  }
  return off;
}

/// out[i, c] = mean_j kernel[i*k + j, c] * feat[nbr(i, j), c]
inline nn::Var neighbor_mean(const nn::Var& kernel, const nn::Var& feat, const NeighborTable& nbrs) {
  const int n = nbrs.size(), k = nbrs.k, c = feat.dim(1);
  if (feat.dim(0) != n || kernel.dim(0) != n * k || kernel.dim(1) != c)
    throw ShapeMismatch("continuous conv: kernel " + shape_str(kernel.shape()) + " vs features " + shape_str(feat.shape()));
  const double inv_k = 1.0 / k;
  Tensor out({n, c});
  const Tensor& kv = kernel.value();
  const Tensor& fv = feat.value();
  for (int i = 0; i < n; ++i) {
    const int* row = nbrs.row(i);
    double* o = out.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < k; ++j) {
      const double* kr = kv.data() + (static_cast<std::size_t>(i) * k + j) * c;
      const double* fr = fv.data() + static_cast<std::size_t>(row[j]) * c;
      for (int ch = 0; ch < c; ++ch) o[ch] += kr[ch] * fr[ch] * inv_k;
    }
  }
  return nn::make_result(std::move(out), {kernel, feat}, [kernel, feat, nbrs, n, k, c, inv_k](nn::Node& self) {
    Tensor* gk = nn::input_grad(self, 0);
    Tensor* gf = nn::input_grad(self, 1);
    const Tensor& kv = kernel.value();
    const Tensor& fv = feat.value();
    for (int i = 0; i < n; ++i) {
      const int* row = nbrs.row(i);
      const double* go = self.grad.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < k; ++j) {
        const std::size_t kr = (static_cast<std::size_t>(i) * k + j) * c;
        const std::size_t fr = static_cast<std::size_t>(row[j]) * c;
        for (int ch = 0; ch < c; ++ch) {
          if (gk) (*gk)[kr + ch] += go[ch] * fv[fr + ch] * inv_k;
          if (gf) (*gf)[fr + ch] += go[ch] * kv[kr + ch] * inv_k;
        }
      }
    }
  });
}

/// Parametric continuous convolution over the k nearest neighbours.
/// feat: K x C point features.
inline nn::Var continuous_conv(const nn::Var& feat, const PointSet& pts, const NeighborTable& nbrs,
                               const KernelMlp& mlp) {
  const nn::Var kernel = mlp(nn::Var::constant(neighbor_offsets(pts, nbrs)));
  return neighbor_mean(kernel, feat, nbrs);
}

inline nn::Var continuous_conv(const nn::Var& feat, const PointSet& pts, int k, const KernelMlp& mlp) {
  return continuous_conv(feat, pts, knn(pts, k), mlp);
}

// ---------------------------------------------------------------------------
// fuse block and depth head

struct FuseBlockConfig {
  int n_blocks = 2;
  int knn_k = 9;
  std::vector<int> kernel_mlp_widths{32};
  int channels_2d = 32;

  void validate() const {
    if (n_blocks < 1) throw ShapeError("fuse n_blocks must be >= 1");
    if (knn_k < 1) throw ShapeError("fuse knn_k must be >= 1");
    if (channels_2d < 2) throw ShapeError("fuse channels_2d must be >= 2");
    for (int w : kernel_mlp_widths)
      if (w < 1) throw ShapeError("fuse kernel_mlp_widths entries must be >= 1");
  }
};

/// Two parallel paths over the same C x H x W map: a 3x3 conv pair on the
/// grid, and gather -> continuous conv -> scatter over the sparse points.
/// Their sum is added to the input.
class FuseBlock {
 public:
  FuseBlock() = default;
  FuseBlock(const nn::Scope& scope, int channels, const FuseBlockConfig& cfg)
      : conv1_(scope / "conv1", channels, channels, 3, nn::ConvOptions::same(3)),
        conv2_(scope / "conv2", channels, channels, 3, nn::ConvOptions::same(3)),
        kernel_(scope / "kernel_mlp", cfg.kernel_mlp_widths, channels) {}

  nn::Var grid_path(const nn::Var& x) const { return conv2_(nn::relu(conv1_(x))); }

  nn::Var point_path(const nn::Var& x, const PointSet& pts, const NeighborTable& nbrs) const {
    const nn::Var at_points = nn::gather_pixels(x, pts.pixel_index);
    return nn::scatter_pixels(continuous_conv(at_points, pts, nbrs, kernel_), pts.pixel_index, x.dim(1), x.dim(2));
  }

  nn::Var operator()(const nn::Var& x, const PointSet& pts, const NeighborTable& nbrs) const {
    return nn::add_n({x, grid_path(x), point_path(x, pts, nbrs)});
  }

 private:
  nn::Conv2d conv1_, conv2_;
  KernelMlp kernel_;
};

struct DepthHeadConfig {
  FuseBlockConfig fuse;
  double max_range_mm = data::kDefaultMaxRangeMm;
  /// The rectified output is multiplied by this, so unit activations map to metres.
  double output_scale_mm = 10000.0;
  bool raw_semantic_logits = false;
};

/// Dense depth (1 x H x W, millimetres) from RGB, sparse depth and optional
/// semantic channels.
class DepthHead {
 public:
  DepthHead(const nn::Scope& scope, int semantic_channels, const DepthHeadConfig& cfg)
      : cfg_(cfg), semantic_channels_(semantic_channels) {
    cfg.fuse.validate();
    const int c = cfg.fuse.channels_2d;
    const int image_width = c / 2, sparse_width = c - c / 2;
    const auto same = nn::ConvOptions::same(3);
    image1_ = nn::Conv2d(scope / "image_stack" / "conv1", 4 + semantic_channels, image_width, 3, same);
    image2_ = nn::Conv2d(scope / "image_stack" / "conv2", image_width, image_width, 3, same);
    sparse1_ = nn::Conv2d(scope / "sparse_stack" / "conv1", 1, sparse_width, 3, same);
    sparse2_ = nn::Conv2d(scope / "sparse_stack" / "conv2", sparse_width, sparse_width, 3, same);
    for (int b = 0; b < cfg.fuse.n_blocks; ++b) blocks_.emplace_back(scope / ("fuse" + std::to_string(b + 1)), c, cfg.fuse);
    refine1_ = nn::Conv2d(scope / "refine" / "conv1", c, c, 3, same);
    refine2_ = nn::Conv2d(scope / "refine" / "conv2", c, 1, 3, same);
  }

  /// Softmax probabilities of semantic logits, or the logits themselves
  /// when configured for raw input.
  nn::Var encode_semantics(const nn::Var& logits) const {
    return cfg_.raw_semantic_logits ? logits : nn::softmax_channels(logits);
  }

  /// sparse_mm: H x W. `semantic` must carry exactly semantic_channels() maps
  /// when that is nonzero.
  nn::Var operator()(const nn::Var& rgb, const Tensor& sparse_mm, const data::Intrinsics& intr,
                     const std::optional<nn::Var>& semantic = std::nullopt) const {
    return forward_points(rgb, sparse_mm, unproject(sparse_mm, intr), semantic);
  }

  nn::Var forward_points(const nn::Var& rgb, const Tensor& sparse_mm, const PointSet& pts,
                         const std::optional<nn::Var>& semantic = std::nullopt) const {
    const int h = rgb.dim(1), w = rgb.dim(2);
    if (sparse_mm.ndim() != 2 || sparse_mm.dim(0) != h || sparse_mm.dim(1) != w)
      throw ShapeMismatch("sparse depth " + shape_str(sparse_mm.shape()) + " vs rgb " + shape_str(rgb.shape()));
    if (semantic_channels_ > 0 && !semantic) throw MissingInput("semantic");
    if (semantic_channels_ == 0 && semantic) throw ShapeMismatch("depth head built without semantic input");
    if (semantic && (semantic->dim(0) != semantic_channels_ || semantic->dim(1) != h || semantic->dim(2) != w))
      throw ShapeMismatch("semantic input " + shape_str(semantic->shape()));

    Tensor sparse_in = sparse_mm.reshaped({1, h, w});
    for (double& v : sparse_in.values()) v /= cfg_.max_range_mm;
    const nn::Var sparse = nn::Var::constant(std::move(sparse_in));

    std::vector<nn::Var> image_in{sparse, rgb};
    if (semantic) image_in.push_back(*semantic);
    const nn::Var a = nn::relu(image2_(nn::relu(image1_(nn::concat_channels(image_in)))));
    const nn::Var b = nn::relu(sparse2_(nn::relu(sparse1_(sparse))));
    nn::Var x = nn::concat_channels({a, b});

    const NeighborTable nbrs = knn(pts, cfg_.fuse.knn_k);
    for (const auto& block : blocks_) x = block(x, pts, nbrs);
    const nn::Var y = refine2_(nn::relu(refine1_(x)));
    return nn::scale(nn::softplus(y), cfg_.output_scale_mm);
  }

  int semantic_channels() const { return semantic_channels_; }
  const DepthHeadConfig& config() const { return cfg_; }

 private:
  DepthHeadConfig cfg_;
  int semantic_channels_ = 0;
  nn::Conv2d image1_, image2_, sparse1_, sparse2_;
  std::vector<FuseBlock> blocks_;
  nn::Conv2d refine1_, refine2_;
};

}  // namespace semsegdepth
