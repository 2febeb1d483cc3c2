#include <gtest/gtest.h>

#include <numeric>

#include "gradcheck.hpp"
#include "semsegdepth/data/dataset_dir.hpp"
#include "semsegdepth/depth_branch.hpp"
#include "semsegdepth/joint_branch.hpp"
#include "semsegdepth/losses_metrics.hpp"
#include "semsegdepth/semantic_branch.hpp"

using namespace semsegdepth;
using semsegdepth::testing::dead_parameters;
using semsegdepth::testing::grad_check_store;
using semsegdepth::testing::random_tensor;

namespace {

BackboneConfig tiny_backbone(int fpn = 8) {
  BackboneConfig c = BackboneConfig::micro();
  c.fpn_channels = fpn;
  return c;
}

DepthHeadConfig micro_depth() {
  DepthHeadConfig c;
  c.fuse.n_blocks = 2;
  c.fuse.knn_k = 4;
  c.fuse.kernel_mlp_widths = {8};
  c.fuse.channels_2d = 8;
  return c;
}

data::LabelMap random_labels(int h, int w, int nc, Rng& rng) {
  data::LabelMap m(h, w);
  for (int& v : m.labels) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(nc)));
  return m;
}

nn::Var readout(const std::vector<nn::Var>& xs, Rng& rng) {
  std::vector<nn::Var> terms;
  for (const auto& x : xs) terms.push_back(nn::weighted_sum(x, random_tensor(x.shape(), rng)));
  return nn::add_n(terms);
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace

// ---------------------------------------------------------------------------
// backbone

TEST(Backbone, PaddedPaperCropShapes) {
  nn::ParamStore store(1);
  Backbone net(nn::Scope(store, "backbone"), tiny_backbone());
  nn::NoGradGuard ng;
  Rng rng(2);
  const auto p = net.extract_padded(nn::Var::constant(random_tensor({3, 200, 1000}, rng)));
  // shape walk: pad to 32, then halve per stride level
  const int hp = ceil_div(200, 32) * 32, wp = ceil_div(1000, 32) * 32;
  ASSERT_EQ(hp, 224);
  ASSERT_EQ(wp, 1024);
  const auto levels = p.levels();
  for (int i = 0; i < 4; ++i) {
    const int s = 4 << i;
    EXPECT_EQ(levels[i].shape(), (Shape{8, hp / s, wp / s})) << "stride " << s;
  }
  EXPECT_EQ(p.p4.shape(), (Shape{8, 56, 256}));
  EXPECT_EQ(p.p32.shape(), (Shape{8, 7, 32}));
  EXPECT_EQ(p.height, 200);
  EXPECT_EQ(p.width, 1000);
}

TEST(Backbone, PowerOfTwoShapes) {
  nn::ParamStore store(1);
  Backbone net(nn::Scope(store, "backbone"), tiny_backbone(64));
  nn::NoGradGuard ng;
  Rng rng(3);
  const auto p = net.extract_pyramid(nn::Var::constant(random_tensor({3, 64, 64}, rng)));
  EXPECT_EQ(p.p4.shape(), (Shape{64, 16, 16}));
  EXPECT_EQ(p.p8.shape(), (Shape{64, 8, 8}));
  EXPECT_EQ(p.p16.shape(), (Shape{64, 4, 4}));
  EXPECT_EQ(p.p32.shape(), (Shape{64, 2, 2}));
}

TEST(Backbone, ResNet50PresetLayout) {
  const auto c = BackboneConfig::resnet50();
  EXPECT_EQ(c.stage_block_counts, (std::array<int, 4>{3, 4, 6, 3}));
  EXPECT_EQ(c.stage_out_channels(0), 256);
  EXPECT_EQ(c.stage_out_channels(3), 2048);
  EXPECT_EQ(c.fpn_channels, 256);
}

TEST(Backbone, RejectsUnpaddedInputAndBadConfig) {
  nn::ParamStore store(1);
  Backbone net(nn::Scope(store, "backbone"), tiny_backbone());
  EXPECT_THROW(net.extract_pyramid(nn::Var::constant(Tensor({3, 40, 64}))), ShapeError);
  BackboneConfig bad = tiny_backbone();
  bad.stage_block_counts[2] = 0;
  nn::ParamStore other(1);
  EXPECT_THROW(Backbone(nn::Scope(other, "b"), bad), ShapeError);
}

TEST(Backbone, PureFunction) {
  nn::ParamStore store(5);
  Backbone net(nn::Scope(store, "backbone"), tiny_backbone());
  Rng rng(4);
  const auto x = nn::Var::constant(random_tensor({3, 32, 64}, rng));
  const auto a = net.extract_pyramid(x), b = net.extract_pyramid(x);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(a.levels()[i].value(), b.levels()[i].value());
}

TEST(Backbone, NoDeadParameters) {
  nn::ParamStore store(6);
  Backbone net(nn::Scope(store, "backbone"), tiny_backbone());
  Rng rng(7);
  const auto dead = dead_parameters(
      [&](int b) {
        const int side = 64 + 32 * (b % 3);
        const auto p = net.extract_pyramid(nn::Var::constant(random_tensor({3, side, side}, rng)));
        const auto l = p.levels();
        return readout({l.begin(), l.end()}, rng);
      },
      store, 12);
  EXPECT_TRUE(dead.empty()) << dead.front();
}

TEST(Backbone, GradientMatchesFiniteDifferences) {
  nn::ParamStore store(8);
  Backbone net(nn::Scope(store, "backbone"), tiny_backbone());
  Rng rng(9);
  const auto x = nn::Var::constant(random_tensor({3, 32, 32}, rng));
  std::vector<Tensor> w;
  {
    const auto p = net.extract_pyramid(x);
    for (const auto& l : p.levels()) w.push_back(random_tensor(l.shape(), rng));
  }
  const auto loss = [&] {
    const auto l = net.extract_pyramid(x).levels();
    std::vector<nn::Var> terms;
    for (int i = 0; i < 4; ++i) terms.push_back(nn::weighted_sum(l[i], w[i]));
    return nn::add_n(terms);
  };
  const auto r = grad_check_store(loss, store, 12, 10);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

// ---------------------------------------------------------------------------
// semantic branch

TEST(SemanticBranch, LsfeShapes) {
  nn::ParamStore store(1);
  nn::NoGradGuard ng;
  Lsfe wide(nn::Scope(store, "a"), 64, 128);
  EXPECT_EQ(wide(nn::Var::constant(Tensor({64, 50, 250}, 0.1))).shape(), (Shape{128, 50, 250}));
  Lsfe same(nn::Scope(store, "b"), 128, 128);
  EXPECT_EQ(same(nn::Var::constant(Tensor({128, 8, 8}, 0.1))).shape(), (Shape{128, 8, 8}));
}

TEST(SemanticBranch, LsfeZeroInZeroOut) {
  nn::ParamStore store(1);
  Lsfe lsfe(nn::Scope(store, "lsfe"), 4, 8);
  for (auto& [key, v] : store.params())
    if (key.find("conv.weight") != std::string::npos) v.mutable_value().fill(0.0);
  nn::NoGradGuard ng;
  const auto y = lsfe(nn::Var::constant(Tensor({4, 5, 6})));
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(SemanticBranch, DpcShape) {
  nn::ParamStore store(1);
  Dpc dpc(nn::Scope(store, "dpc"), 64, 128);
  nn::NoGradGuard ng;
  Rng rng(1);
  EXPECT_EQ(dpc(nn::Var::constant(random_tensor({64, 13, 63}, rng))).shape(), (Shape{128, 13, 63}));
}

TEST(SemanticBranch, DpcBranchOnConstantFieldIsConstant) {
  nn::ParamStore store(2);
  nn::NoGradGuard ng;
  for (std::size_t i = 0; i < Dpc::kRates.size(); ++i) {
    const auto [rh, rw] = Dpc::kRates[i];
    nn::Conv2d dw(nn::Scope(store, "dw" + std::to_string(i)), 4, 4, 3, SeparableConv::depthwise_options(4, rh, rw));
    const auto y = dw(nn::Var::constant(Tensor({4, 50, 60}, 0.7)));
    for (int c = 0; c < 4; ++c)
      for (int yy = rh; yy < 50 - rh; ++yy)
        for (int xx = rw; xx < 60 - rw; ++xx) EXPECT_DOUBLE_EQ(y.value().at(c, yy, xx), y.value().at(c, rh, rw));
  }
}

TEST(SemanticBranch, DpcReceptiveFieldReachesLargestDilation) {
  // perturbing one input pixel moves exactly the outputs at the dilated tap offsets
  nn::ParamStore store(3);
  const auto [rh, rw] = Dpc::kRates[3];
  nn::Conv2d dw(nn::Scope(store, "dw"), 1, 1, 3, SeparableConv::depthwise_options(1, rh, rw));
  Rng rng(4);
  const Tensor x = random_tensor({1, 60, 60}, rng);
  nn::NoGradGuard ng;
  const Tensor base = dw(nn::Var::constant(x)).value();
  Tensor bumped = x;
  bumped.at(0, 30, 30) += 1e-3;
  const Tensor moved = dw(nn::Var::constant(bumped)).value();
  for (int y = 0; y < 60; ++y)
    for (int xx = 0; xx < 60; ++xx) {
      const bool tap = std::abs(y - 30) % rh == 0 && std::abs(y - 30) <= rh && std::abs(xx - 30) % rw == 0 &&
                       std::abs(xx - 30) <= rw;
      EXPECT_EQ(moved.at(0, y, xx) != base.at(0, y, xx), tap) << y << "," << xx;
    }
  EXPECT_NE(moved.at(0, 30 + rh, 30 + rw), base.at(0, 30 + rh, 30 + rw));
}

TEST(SemanticBranch, MismatchCorrectionUpsamples) {
  nn::ParamStore store(1);
  nn::NoGradGuard ng;
  Rng rng(2);
  MismatchCorrection mc(nn::Scope(store, "mc"), 128);
  EXPECT_EQ(mc(nn::Var::constant(random_tensor({128, 25, 125}, rng))).shape(), (Shape{128, 50, 250}));
  const auto one = mc(nn::Var::constant(random_tensor({128, 1, 1}, rng)));
  ASSERT_EQ(one.shape(), (Shape{128, 2, 2}));
  for (int c = 0; c < 128; ++c)
    for (int i = 1; i < 4; ++i) EXPECT_EQ(one.value()[c * 4 + i], one.value()[c * 4]);
}

TEST(SemanticBranch, HeadOutputContract) {
  nn::ParamStore store(1);
  Backbone bb(nn::Scope(store, "backbone"), tiny_backbone());
  SemanticHead head(nn::Scope(store, "semantic"), 8, 5, {8});
  nn::NoGradGuard ng;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const auto logits = head(bb.extract_pyramid(nn::Var::constant(random_tensor({3, 64, 64}, rng))));
    ASSERT_EQ(logits.shape(), (Shape{5, 64, 64}));
    for (double v : logits.value().values()) ASSERT_TRUE(std::isfinite(v));
    for (int l : argmax_labels(logits.value()).labels) ASSERT_LT(l, 5);
  }
}

TEST(SemanticBranch, OutputMatchesInputExtent) {
  nn::ParamStore store(2);
  Backbone bb(nn::Scope(store, "backbone"), tiny_backbone());
  SemanticHead head(nn::Scope(store, "semantic"), 8, 3, {8});
  nn::NoGradGuard ng;
  Rng rng(5);
  for (int t = 0; t < 12; ++t) {
    const int h = 8 + static_cast<int>(rng.below(90)), w = 8 + static_cast<int>(rng.below(90));
    const auto logits = head(bb.extract_padded(nn::Var::constant(random_tensor({3, h, w}, rng))));
    EXPECT_EQ(logits.shape(), (Shape{3, h, w}));
  }
}

TEST(SemanticBranch, NoDeadParameters) {
  nn::ParamStore store(3);
  Backbone bb(nn::Scope(store, "backbone"), tiny_backbone());
  SemanticHead head(nn::Scope(store, "semantic"), 8, 4, {8});
  Rng rng(6);
  const auto dead = dead_parameters(
      [&](int b) {
        const int side = 64 + 32 * (b % 3);
        const auto x = nn::Var::constant(random_tensor({3, side, side}, rng));
        return semantic_loss(head(bb.extract_pyramid(x)), random_labels(side, side, 4, rng));
      },
      store, 12);
  EXPECT_TRUE(dead.empty()) << dead.front();
}

TEST(SemanticBranch, GradientMatchesFiniteDifferences) {
  nn::ParamStore store(4);
  nn::ParamStore frozen(5);
  Backbone bb(nn::Scope(frozen, "backbone"), tiny_backbone());
  SemanticHead head(nn::Scope(store, "semantic"), 8, 3, {8});
  Rng rng(7);
  FeaturePyramid p;
  {
    nn::NoGradGuard ng;
    p = bb.extract_pyramid(nn::Var::constant(random_tensor({3, 32, 32}, rng)));
  }
  const auto gt = random_labels(32, 32, 3, rng);
  const auto r = grad_check_store([&] { return semantic_loss(head(p), gt); }, store, 12, 8);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

// ---------------------------------------------------------------------------
// depth branch

TEST(DepthBranch, UnprojectExamples) {
  const data::Intrinsics in{500.0, 400.0, 3.0, 2.0};
  Tensor s({5, 8});
  s[2 * 8 + 3] = 2000.0;  // principal point
  auto pts = unproject(s, in);
  ASSERT_EQ(pts.size(), 1);
  EXPECT_EQ(pts.points[0], (std::array<double, 3>{0.0, 0.0, 2.0}));
  EXPECT_EQ(pts.pixel_index[0], 2 * 8 + 3);

  const data::Intrinsics unit{4.0, 4.0, 1.0, 1.0};
  Tensor t({3, 6});
  t[1 * 6 + 5] = 1000.0;  // (cx + fx, cy)
  pts = unproject(t, unit);
  EXPECT_DOUBLE_EQ(pts.points[0][0], 1.0);
  EXPECT_DOUBLE_EQ(pts.points[0][1], 0.0);
  EXPECT_DOUBLE_EQ(pts.points[0][2], 1.0);
}

TEST(DepthBranch, UnprojectRejectsEmptyMap) { EXPECT_THROW(unproject(Tensor({4, 4}), {1, 1, 2, 2}), EmptySparseDepth); }

TEST(DepthBranch, ReprojectRoundTrip) {
  Rng rng(1);
  const data::Intrinsics in{725.0087, 725.0087, 620.5, 187.0};
  Tensor s({40, 70});
  for (double& v : s.values())
    if (rng.uniform() < 0.2) v = 10.0 * static_cast<double>(rng.uniform_int(1, 5000));
  s[0] = 1230.0;
  const auto pts = unproject(s, in);
  const auto back = reproject(pts, in);
  for (int i = 0; i < pts.size(); ++i) {
    EXPECT_EQ(back[i].v * 70 + back[i].u, pts.pixel_index[i]);
    EXPECT_NEAR(back[i].depth_mm, s[pts.pixel_index[i]], 1e-9);
  }
}

TEST(DepthBranch, ToySceneReprojectsToItsPixels) {
  const auto sample = data::make_toy_sample(0, 3, 4, 48, 64, {});
  const auto pts = unproject(sample.sparse_depth, sample.intrinsics);
  const auto& in = sample.intrinsics;
  for (int i = 0; i < pts.size(); ++i) {
    const auto& p = pts.points[i];
    const double u = p[0] * in.fx / p[2] + in.cx, v = p[1] * in.fy / p[2] + in.cy;
    EXPECT_NEAR(u, pts.pixel_index[i] % 64, 1e-3);
    EXPECT_NEAR(v, pts.pixel_index[i] / 64, 1e-3);
  }
}

namespace {

PointSet random_points(int n, Rng& rng, bool lattice) {
  PointSet p;
  std::vector<int> pix(static_cast<std::size_t>(n) * 3);
  std::iota(pix.begin(), pix.end(), 0);
  rng.shuffle(pix);
  for (int i = 0; i < n; ++i) {
    if (lattice) {
      p.points.push_back({static_cast<double>(rng.uniform_int(0, 4)), static_cast<double>(rng.uniform_int(0, 4)),
                          static_cast<double>(rng.uniform_int(1, 3))});
    } else {
      p.points.push_back({rng.uniform(-5, 5), rng.uniform(-2, 2), rng.uniform(1, 30)});
    }
    p.pixel_index.push_back(pix[i]);
  }
  return p;
}

// Sort all pairs, then take the first k.
std::vector<int> oracle_neighbors(const PointSet& p, int i, int k) {
  std::vector<std::tuple<double, int, int>> all;
  for (int j = 0; j < p.size(); ++j) {
    double d = 0.0;
    for (int a = 0; a < 3; ++a) d += (p.points[j][a] - p.points[i][a]) * (p.points[j][a] - p.points[i][a]);
    all.emplace_back(d, p.pixel_index[j], j);
  }
  std::sort(all.begin(), all.end());
  std::vector<int> out;
  for (int j = 0; j < std::min(k, p.size()); ++j) out.push_back(std::get<2>(all[j]));
  return out;
}

}  // namespace

TEST(DepthBranch, KnnSmallGridExample) {
  PointSet p;
  for (int i = 0; i < 5; ++i) {
    p.points.push_back({static_cast<double>(i), 0.0, 1.0});
    p.pixel_index.push_back(i);
  }
  const auto t = knn(p, 3);
  ASSERT_EQ(t.k, 3);
  for (int i = 0; i < 5; ++i) {
    const std::vector<int> got(t.row(i), t.row(i) + 3);
    EXPECT_EQ(got, oracle_neighbors(p, i, 3));
  }
  EXPECT_EQ((std::vector<int>(t.row(2), t.row(2) + 3)), (std::vector<int>{2, 1, 3}));
}

TEST(DepthBranch, KnnBothPathsMatchOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    const bool lattice = trial % 2;
    const int n = 1 + static_cast<int>(rng.below(200));
    const int k = 1 + static_cast<int>(rng.below(12));
    const auto p = random_points(n, rng, lattice);
    const auto bf = knn_brute_force(p, k), grid = knn_grid(p, k);
    ASSERT_EQ(bf.k, std::min(k, n));
    for (int i = 0; i < n; ++i) {
      const auto want = oracle_neighbors(p, i, k);
      ASSERT_EQ(std::vector<int>(bf.row(i), bf.row(i) + bf.k), want) << "brute force, trial " << trial;
      ASSERT_EQ(std::vector<int>(grid.row(i), grid.row(i) + grid.k), want) << "grid, trial " << trial;
    }
  }
}

TEST(DepthBranch, KnnGridOnLargeSurfaceCloud) {
  // a full-frame point set exercising the grid path against brute force
  const auto sample = data::make_toy_sample(1, 9, 4, 96, 160, {});
  const auto pts = unproject(sample.sparse_depth, sample.intrinsics);
  ASSERT_GT(pts.size(), kBruteForceKnnLimit);
  const auto a = knn(pts, 9), b = knn_brute_force(pts, 9);
  EXPECT_EQ(a.index, b.index);
}

TEST(DepthBranch, ContinuousConvSinglePoint) {
  nn::ParamStore store(1);
  KernelMlp mlp(nn::Scope(store, "mlp"), {4}, 3);
  Rng rng(2);
  for (auto& [_, v] : store.params()) v.mutable_value() = random_tensor(v.shape(), rng);
  PointSet p;
  p.points.push_back({0.3, -0.2, 4.0});
  p.pixel_index.push_back(7);
  const auto feat = nn::Var::constant(random_tensor({1, 3}, rng));
  const auto out = continuous_conv(feat, p, 5, mlp);
  const auto k0 = mlp(nn::Var::constant(Tensor({1, 3})));
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out.value()[c], k0.value()[c] * feat.value()[c]);
}

TEST(DepthBranch, ContinuousConvTranslationInvariant) {
  nn::ParamStore store(2);
  KernelMlp mlp(nn::Scope(store, "mlp"), {6}, 4);
  Rng rng(3);
  for (auto& [_, v] : store.params()) v.mutable_value() = random_tensor(v.shape(), rng);
  // lattice offsets stay exact under a power-of-two shift
  auto p = random_points(30, rng, true);
  const auto feat = nn::Var::constant(random_tensor({30, 4}, rng));
  const auto a = continuous_conv(feat, p, 5, mlp);
  for (auto& q : p.points) {
    q[0] += 8.0;
    q[1] -= 4.0;
    q[2] += 16.0;
  }
  EXPECT_EQ(continuous_conv(feat, p, 5, mlp).value(), a.value());
}

TEST(DepthBranch, ContinuousConvGradient) {
  nn::ParamStore store(3);
  KernelMlp mlp(nn::Scope(store, "mlp"), {5}, 3);
  Rng rng(4);
  for (auto& [_, v] : store.params()) v.mutable_value() = random_tensor(v.shape(), rng, 0.5);
  const auto p = random_points(15, rng, false);
  auto feat = nn::Var::leaf(random_tensor({15, 3}, rng));
  const Tensor w = random_tensor({15, 3}, rng);
  const auto loss = [&] { return nn::weighted_sum(continuous_conv(feat, p, 4, mlp), w); };
  auto leaves = semsegdepth::testing::all_leaves(store);
  leaves.emplace_back("feat", feat);
  const auto r = semsegdepth::testing::grad_check(loss, leaves, 6, 5);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

namespace {

struct FuseFixture {
  nn::ParamStore store{11};
  FuseBlockConfig cfg{1, 4, {6}, 5};
  FuseBlock block{nn::Scope(store, "fuse"), 5, cfg};
  PointSet pts;
  NeighborTable nbrs;
  nn::Var x;

  FuseFixture() {
    Rng rng(12);
    Tensor sparse({9, 11});
    for (int i = 0; i < 14; ++i) sparse[rng.below(99)] = rng.uniform(1000, 20000);
    pts = unproject(sparse, {10, 10, 5, 4});
    nbrs = knn(pts, cfg.knn_k);
    x = nn::Var::constant(random_tensor({5, 9, 11}, rng));
  }
};

}  // namespace

TEST(DepthBranch, FuseBlockDecomposition) {
  FuseFixture f;
  for (auto& [key, v] : f.store.params())
    if (key.find("conv") != std::string::npos && key.find("bias") != std::string::npos)
      v.mutable_value() = Tensor(v.shape(), 0.05);
  const auto out = f.block(f.x, f.pts, f.nbrs);
  EXPECT_EQ(out.shape(), f.x.shape());
  const auto grid = nn::add(f.x, f.block.grid_path(f.x));
  std::vector<char> hit(99, 0);
  for (int p : f.pts.pixel_index) hit[p] = 1;
  for (int c = 0; c < 5; ++c)
    for (int p = 0; p < 99; ++p)
      if (!hit[p]) EXPECT_EQ(out.value()[c * 99 + p], grid.value()[c * 99 + p]);

  for (auto& [key, v] : f.store.params())
    if (key.find("kernel_mlp") != std::string::npos) v.mutable_value().fill(0.0);
  EXPECT_EQ(f.block(f.x, f.pts, f.nbrs).value(), grid.value());
}

TEST(DepthBranch, FuseBlockGradient) {
  FuseFixture f;
  Rng rng(13);
  for (auto& [_, v] : f.store.params()) v.mutable_value() = random_tensor(v.shape(), rng, 0.5);
  const Tensor w = random_tensor({5, 9, 11}, rng);
  const auto r = grad_check_store([&] { return nn::weighted_sum(f.block(f.x, f.pts, f.nbrs), w); }, f.store, 12, 14);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

TEST(DepthBranch, HeadOutputContract) {
  data::SparsifyConfig sp;
  sp.n_points = 300;
  const auto s = data::make_toy_sample(0, 4, 4, 64, 64, sp);
  nn::ParamStore store(1);
  DepthHead head(nn::Scope(store, "depth"), 4, micro_depth());
  Rng rng(2);
  const auto sem = head.encode_semantics(nn::Var::constant(random_tensor({4, 64, 64}, rng)));
  const auto out = head(nn::Var::constant(s.rgb), s.sparse_depth, s.intrinsics, sem);
  ASSERT_EQ(out.shape(), (Shape{1, 64, 64}));
  for (double v : out.value().values()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
  }
  EXPECT_THROW(head(nn::Var::constant(s.rgb), s.sparse_depth, s.intrinsics), MissingInput);
  EXPECT_THROW(head(nn::Var::constant(s.rgb), Tensor({64, 64}), s.intrinsics, sem), EmptySparseDepth);
}

TEST(DepthBranch, HeadWithoutSemanticsAndSparseSensitivity) {
  data::SparsifyConfig sp;
  sp.n_points = 200;
  const auto s = data::make_toy_sample(2, 4, 4, 32, 32, sp);
  nn::ParamStore store(1);
  DepthHead head(nn::Scope(store, "depth"), 0, micro_depth());
  const auto rgb = nn::Var::constant(s.rgb);
  const auto a = head(rgb, s.sparse_depth, s.intrinsics);
  Tensor doubled = s.sparse_depth;
  for (double& v : doubled.values()) v *= 2;
  const auto b = head(rgb, doubled, s.intrinsics);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) diff += std::pow(a.value()[i] - b.value()[i], 2);
  EXPECT_GT(diff, 0.0);
  EXPECT_THROW(head(rgb, s.sparse_depth, s.intrinsics, nn::Var::constant(Tensor({4, 32, 32}))), ShapeMismatch);
}

TEST(DepthBranch, PointOrderDoesNotMatter) {
  data::SparsifyConfig sp;
  sp.n_points = 150;
  const auto s = data::make_toy_sample(3, 4, 3, 32, 32, sp);
  nn::ParamStore store(2);
  DepthHead head(nn::Scope(store, "depth"), 3, micro_depth());
  Rng rng(3);
  const auto sem = nn::Var::constant(random_tensor({3, 32, 32}, rng));
  const auto rgb = nn::Var::constant(s.rgb);
  PointSet pts = unproject(s.sparse_depth, s.intrinsics);
  const auto a = head.forward_points(rgb, s.sparse_depth, pts, sem);
  std::vector<int> order(static_cast<std::size_t>(pts.size()));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  PointSet shuffled;
  for (int i : order) {
    shuffled.points.push_back(pts.points[i]);
    shuffled.pixel_index.push_back(pts.pixel_index[i]);
  }
  const auto b = head.forward_points(rgb, s.sparse_depth, shuffled, sem);
  for (std::size_t i = 0; i < a.value().size(); ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-9 * std::abs(a.value()[i]));
}

TEST(DepthBranch, HeadNoDeadParameters) {
  nn::ParamStore store(4);
  DepthHead head(nn::Scope(store, "depth"), 3, micro_depth());
  data::SparsifyConfig sp;
  sp.n_points = 120;
  Rng rng(5);
  const auto dead = dead_parameters(
      [&](int b) {
        const auto s = data::make_toy_sample(static_cast<std::size_t>(b), 6, 3, 32, 32, sp);
        const auto sem = nn::Var::constant(random_tensor({3, 32, 32}, rng));
        return depth_loss(head(nn::Var::constant(s.rgb), s.sparse_depth, s.intrinsics, sem), s.dense_depth_gt);
      },
      store, 2);
  EXPECT_TRUE(dead.empty()) << dead.front();
}

TEST(DepthBranch, HeadGradientMatchesFiniteDifferences) {
  data::SparsifyConfig sp;
  sp.n_points = 20;
  const auto s = data::make_toy_sample(5, 7, 3, 16, 16, sp);
  nn::ParamStore store(5);
  DepthHead head(nn::Scope(store, "depth"), 3, micro_depth());
  Rng rng(6);
  auto sem = nn::Var::leaf(random_tensor({3, 16, 16}, rng));
  const auto loss = [&] {
    return depth_loss(head(nn::Var::constant(s.rgb), s.sparse_depth, s.intrinsics, head.encode_semantics(sem)),
                      s.dense_depth_gt);
  };
  const auto r = grad_check_store(loss, store, 16, 7);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
  const auto rs = semsegdepth::testing::grad_check(loss, {{"semantic", sem}}, 8, 8);
  EXPECT_LT(rs.max_rel_error, 1e-3) << rs.worst;
}

// ---------------------------------------------------------------------------
// joint branch

TEST(JointBranch, ShapeAndPurity) {
  nn::ParamStore store(1);
  JointHead head(nn::Scope(store, "joint"), 5, {});
  Rng rng(2);
  const auto sem = nn::Var::constant(random_tensor({5, 64, 64}, rng));
  const auto depth = nn::Var::constant(Tensor({1, 64, 64}, 5000.0));
  const auto a = head(sem, depth);
  EXPECT_EQ(a.shape(), (Shape{5, 64, 64}));
  EXPECT_EQ(head(sem, depth).value(), a.value());
  EXPECT_THROW(head(sem, nn::Var::constant(Tensor({1, 32, 64}))), ShapeMismatch);
}

TEST(JointBranch, DepthGuidesSemantics) {
  nn::ParamStore store(2);
  JointHeadConfig cfg;
  cfg.hidden_channels = 8;
  JointHead head(nn::Scope(store, "joint"), 3, cfg);
  Rng rng(3);
  for (int t = 0; t < 3; ++t) {
    const auto sem = nn::Var::constant(random_tensor({3, 12, 12}, rng));
    Tensor d({1, 12, 12});
    for (double& v : d.values()) v = rng.uniform(1000, 40000);
    auto depth = nn::Var::leaf(d);
    nn::backward(semantic_loss(head(sem, depth), random_labels(12, 12, 3, rng)));
    double norm = 0.0;
    for (double g : depth.grad().values()) norm += g * g;
    EXPECT_GT(norm, 0.0);
  }
}

TEST(JointBranch, StopGradientFlag) {
  nn::ParamStore store(3);
  JointHeadConfig cfg;
  cfg.hidden_channels = 8;
  cfg.stop_depth_gradient = true;
  JointHead head(nn::Scope(store, "joint"), 3, cfg);
  Rng rng(4);
  auto depth = nn::Var::leaf(Tensor({1, 6, 6}, 3000.0));
  depth.node()->ensure_grad();
  nn::backward(semantic_loss(head(nn::Var::constant(random_tensor({3, 6, 6}, rng)), depth), random_labels(6, 6, 3, rng)));
  for (double g : depth.grad().values()) EXPECT_EQ(g, 0.0);
}

TEST(JointBranch, GradientMatchesFiniteDifferences) {
  nn::ParamStore store(4);
  JointHeadConfig cfg;
  cfg.hidden_channels = 6;
  JointHead head(nn::Scope(store, "joint"), 3, cfg);
  Rng rng(5);
  const auto sem = nn::Var::constant(random_tensor({3, 10, 10}, rng));
  Tensor d({1, 10, 10});
  for (double& v : d.values()) v = rng.uniform(1000, 40000);
  const auto depth = nn::Var::constant(d);
  const auto gt = random_labels(10, 10, 3, rng);
  const auto r = grad_check_store([&] { return semantic_loss(head(sem, depth), gt); }, store, 12, 6);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}
