#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "semsegdepth/depth_branch.hpp"
#include "semsegdepth/joint_branch.hpp"
#include "semsegdepth/losses_metrics.hpp"
#include "semsegdepth/semantic_branch.hpp"

namespace semsegdepth {

enum class LossMode { semantic_only, depth_only, separate, joint };

inline std::string_view to_string(LossMode m) {
  switch (m) {
    case LossMode::semantic_only: return "semantic_only";
    case LossMode::depth_only: return "depth_only";
    case LossMode::separate: return "separate";
    case LossMode::joint: return "joint";
  }
  return "?";
}

/// Where the joint head's depth input comes from.
enum class JointDepthSource { none, predicted, sparse_gt, dense_gt };

/// What the depth head sees besides RGB and sparse depth.
enum class DepthSemantics { none, predicted, auxiliary, ground_truth };

/// One row of the variant registry.
struct VariantSpec {
  std::string_view name;
  bool emits_semantic = false;
  bool emits_depth = false;
  bool needs_sparse_depth_gt = false;
  bool needs_dense_depth_gt = false;
  bool needs_semantic_gt = false;
  LossMode loss_mode = LossMode::joint;
  bool shares_semantic_branch = false;
  DepthSemantics depth_semantics = DepthSemantics::none;
  JointDepthSource joint_depth = JointDepthSource::none;

  bool has_semantic_head() const { return emits_semantic; }
  bool has_depth_head() const { return emits_depth; }
  bool has_joint_head() const { return joint_depth != JointDepthSource::none; }
};

/// Registry in ablation-table row order.
inline const std::array<VariantSpec, 9>& variant_table() {
  using DS = DepthSemantics;
  using JD = JointDepthSource;
  static const std::array<VariantSpec, 9> table{{
      {"SemSegNet_b", true, false, false, false, false, LossMode::semantic_only, false, DS::none, JD::none},
      {"DepthNet_b", false, true, false, false, false, LossMode::depth_only, false, DS::none, JD::none},
      {"SemNet_depth_gt", true, false, true, false, false, LossMode::semantic_only, false, DS::none, JD::sparse_gt},
      {"SemNet_depth_dense_gt", true, false, false, true, false, LossMode::semantic_only, false, DS::none, JD::dense_gt},
      {"DepthNet_semantic_gt", false, true, false, false, true, LossMode::depth_only, false, DS::ground_truth, JD::none},
      {"SemSeg_Depth_a", true, true, false, false, false, LossMode::separate, false, DS::none, JD::predicted},
      {"SemSeg_Depth_b", true, true, false, false, false, LossMode::separate, false, DS::auxiliary, JD::predicted},
      {"SemSeg_Depth_c", true, true, false, false, false, LossMode::joint, false, DS::auxiliary, JD::predicted},
      {"SemSegDepth", true, true, false, false, false, LossMode::joint, true, DS::predicted, JD::predicted},
  }};
  return table;
}

inline const VariantSpec& find_variant(std::string_view name) {
  for (const auto& v : variant_table())
    if (v.name == name) return v;
  throw UnknownVariant("unknown variant '" + std::string(name) + "'");
}

/// Kernel size, stride and output channels of one convolution.
struct ConvSpec {
  int k = 1;
  int s = 1;
  int c = 1;

  ConvSpec(int kernel, int stride, int channels) : k(kernel), s(stride), c(channels) {
    if (k < 1 || s < 1 || c < 1) throw ShapeError("ConvSpec fields must be >= 1");
  }
  std::string str() const {
    return "Conv(" + std::to_string(k) + "," + std::to_string(s) + "," + std::to_string(c) + ")";
  }
  bool operator==(const ConvSpec&) const = default;
};

struct ModelConfig {
  int num_classes = 10;
  double max_range_mm = data::kDefaultMaxRangeMm;
  BackboneConfig backbone = BackboneConfig::resnet50();
  SemanticHeadConfig semantic;
  DepthHeadConfig depth;
  JointHeadConfig joint;

  static ModelConfig full(int num_classes) {
    ModelConfig c;
    c.num_classes = num_classes;
    return c;
  }

  /// Desk-scale preset for single-core training on small images.
  static ModelConfig micro(int num_classes) {
    ModelConfig c;
    c.num_classes = num_classes;
    c.backbone = BackboneConfig::micro();
    c.semantic.channels = 16;
    c.depth.fuse = {2, 8, {16}, 16};
    c.joint.hidden_channels = 16;
    return c;
  }

  void validate() const {
    if (num_classes < 2) throw ShapeError("num_classes must be >= 2");
    if (!(max_range_mm > 0.0)) throw ShapeError("max_range_mm must be > 0");
    backbone.validate();
    semantic.validate();
    depth.fuse.validate();
    joint.validate();
  }
};

/// Outputs of one forward pass. `semantic` and `depth` are the variant's
/// declared outputs; the others are internals exposed for auxiliary losses.
struct ModelOutput {
  std::optional<nn::Var> semantic;  // nc x H x W logits
  std::optional<nn::Var> depth;     // 1 x H x W, millimetres
  std::optional<nn::Var> semantic_preliminary;
};

/// Detached per-sample prediction used by evaluation.
struct Prediction {
  std::optional<Tensor> semantic_logits;
  std::optional<Tensor> depth_mm;  // H x W
};

/// Anything evaluate() can score.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string name() const = 0;
  virtual bool emits_semantic() const = 0;
  virtual bool emits_depth() const = 0;
  virtual Prediction predict(const data::ImageSample& sample) const = 0;
};

inline Tensor one_hot(const data::LabelMap& labels, int num_classes) {
  const std::size_t hw = labels.labels.size();
  Tensor out({num_classes, labels.height, labels.width});
  for (std::size_t p = 0; p < hw; ++p) {
    const int l = labels.labels[p];
    if (l < 0 || l >= num_classes) throw InvalidClassId("class id " + std::to_string(l) + " in one-hot input");
    out[static_cast<std::size_t>(l) * hw + p] = 1.0;
  }
  return out;
}

/// A variant instance: its parameter store and the modules the spec calls for.
///
/// Parameter keys are grouped by module: backbone.*, semantic.*,
/// semantic_aux.*, depth.*, joint.*. Variants that share a module use the
/// same keys, so their initial weights (a function of seed and key) agree.
class Model : public Predictor {
 public:
  Model(const VariantSpec& spec, const ModelConfig& cfg, std::uint64_t seed)
      : spec_(spec), cfg_(cfg), store_(std::make_unique<nn::ParamStore>(seed)) {
    cfg.validate();
    const nn::Scope root(*store_, "");
    const int nc = cfg.num_classes;
    if (spec.has_semantic_head() || spec.depth_semantics == DepthSemantics::auxiliary) {
      backbone_.emplace(root / "backbone", cfg.backbone);
    }
    if (spec.has_semantic_head()) semantic_.emplace(root / "semantic", cfg.backbone.fpn_channels, nc, cfg.semantic);
    if (spec.depth_semantics == DepthSemantics::auxiliary)
      semantic_aux_.emplace(root / "semantic_aux", cfg.backbone.fpn_channels, nc, cfg.semantic);
    if (spec.has_depth_head()) {
      DepthHeadConfig d = cfg.depth;
      d.max_range_mm = cfg.max_range_mm;
      depth_.emplace(root / "depth", spec.depth_semantics == DepthSemantics::none ? 0 : nc, d);
    }
    if (spec.has_joint_head()) {
      JointHeadConfig j = cfg.joint;
      j.max_range_mm = cfg.max_range_mm;
      // separate losses: the semantic loss must not train the depth producer
      j.stop_depth_gradient = j.stop_depth_gradient || spec.loss_mode == LossMode::separate;
      joint_.emplace(root / "joint", nc, j);
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  ModelOutput forward(const data::ImageSample& s) const {
    if (s.rgb.empty()) throw MissingInput("rgb");
    const int h = s.height(), w = s.width();
    const nn::Var rgb = nn::Var::constant(s.rgb);
    ModelOutput out;

    std::optional<FeaturePyramid> pyramid;
    if (backbone_) pyramid = backbone_->extract_padded(rgb);

    std::optional<nn::Var> prelim;
    if (semantic_) prelim = (*semantic_)(*pyramid);

    std::optional<nn::Var> depth;
    if (depth_) {
      if (!s.has_sparse_depth()) throw MissingInput("sparse_depth");
      std::optional<nn::Var> sem_in;
      switch (spec_.depth_semantics) {
        case DepthSemantics::none: break;
        case DepthSemantics::predicted: sem_in = depth_->encode_semantics(*prelim); break;
        case DepthSemantics::auxiliary: sem_in = depth_->encode_semantics((*semantic_aux_)(*pyramid)); break;
        case DepthSemantics::ground_truth:
          if (!s.has_semantic()) throw MissingInput("semantic_gt");
          sem_in = nn::Var::constant(one_hot(s.semantic_gt, cfg_.num_classes));
          break;
      }
      depth = (*depth_)(rgb, s.sparse_depth, s.intrinsics, sem_in);
      out.depth = depth;
    }

    if (joint_) {
      nn::Var joint_depth;
      switch (spec_.joint_depth) {
        case JointDepthSource::predicted: joint_depth = *depth; break;
        case JointDepthSource::sparse_gt:
          if (!s.has_sparse_depth()) throw MissingInput("sparse_depth_gt");
          joint_depth = nn::Var::constant(s.sparse_depth.reshaped({1, h, w}));
          break;
        case JointDepthSource::dense_gt:
          if (!s.has_dense_depth()) throw MissingInput("dense_depth_gt");
          joint_depth = nn::Var::constant(s.dense_depth_gt.reshaped({1, h, w}));
          break;
        case JointDepthSource::none: break;
      }
      out.semantic_preliminary = prelim;
      out.semantic = (*joint_)(*prelim, joint_depth);
    } else if (prelim) {
      out.semantic = prelim;
    }
    return out;
  }

  Prediction predict(const data::ImageSample& s) const override {
    nn::NoGradGuard ng;
    const ModelOutput o = forward(s);
    Prediction p;
    if (o.semantic) p.semantic_logits = o.semantic->value();
    if (o.depth) p.depth_mm = o.depth->value().reshaped({s.height(), s.width()});
    return p;
  }

  std::string name() const override { return std::string(spec_.name); }
  bool emits_semantic() const override { return spec_.emits_semantic; }
  bool emits_depth() const override { return spec_.emits_depth; }

  const VariantSpec& spec() const { return spec_; }
  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return *store_; }
  const nn::ParamStore& params() const { return *store_; }

  /// Every convolution as (weight key, Conv(k, s, c)).
  std::vector<std::pair<std::string, ConvSpec>> conv_layers() const {
    std::vector<std::pair<std::string, ConvSpec>> out;
    for (const auto& [key, v] : store_->params()) {
      if (v.value().ndim() != 4) continue;
      out.emplace_back(key, ConvSpec(v.dim(2), store_->conv_stride(key), v.dim(0)));
    }
    return out;
  }

  void save(const std::filesystem::path& path) const { store_->save(path); }
  void load(const std::filesystem::path& path) { store_->load(path); }

 private:
  VariantSpec spec_;
  ModelConfig cfg_;
  std::unique_ptr<nn::ParamStore> store_;
  std::optional<Backbone> backbone_;
  std::optional<SemanticHead> semantic_, semantic_aux_;
  std::optional<DepthHead> depth_;
  std::optional<JointHead> joint_;
};

inline Model build_variant(const VariantSpec& spec, const ModelConfig& cfg, std::uint64_t seed) {
  return Model(spec, cfg, seed);
}

inline Model build_variant(std::string_view name, const ModelConfig& cfg, std::uint64_t seed) {
  return Model(find_variant(name), cfg, seed);
}

/// Oracle predictor that returns the ground truth: saturated one-hot logits
/// and the dense depth map.
class GroundTruthStub : public Predictor {
 public:
  explicit GroundTruthStub(int num_classes) : nc_(num_classes) {}

  std::string name() const override { return "gt-stub"; }
  bool emits_semantic() const override { return true; }
  bool emits_depth() const override { return true; }

  Prediction predict(const data::ImageSample& s) const override {
    if (!s.has_semantic()) throw MissingInput("semantic_gt");
    if (!s.has_dense_depth()) throw MissingInput("dense_depth_gt");
    Prediction p;
    p.semantic_logits = one_hot(s.semantic_gt, nc_);
    p.depth_mm = s.dense_depth_gt;
    return p;
  }

 private:
  int nc_;
};

}  // namespace semsegdepth
