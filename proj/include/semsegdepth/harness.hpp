#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "semsegdepth/data/sparsify.hpp"
#include "semsegdepth/model_zoo.hpp"

namespace semsegdepth {

enum class LrSchedule { constant, poly };

inline std::string_view to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "poly"; }

struct OptimConfig {
  double lr = 16e-4;  // initial rate when a schedule is set
  double momentum = 0.9;
  double weight_decay = 5e-5;
  long steps = 500;
  int batch_size = 2;
  LrSchedule schedule = LrSchedule::constant;
  double poly_power = 0.9;

  /// Rate used for step 1..steps. poly: lr * (1 - (step - 1) / steps)^power.
  double lr_at(long step) const {
    if (schedule == LrSchedule::constant) return lr;
    const double frac = 1.0 - static_cast<double>(step - 1) / static_cast<double>(steps);
    return lr * std::pow(frac, poly_power);
  }

  // lr == 0 is accepted: a frozen run is a useful null experiment.
  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("optim.lr", "must be a finite value >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optim.momentum", "must be in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
      throw ConfigError("optim.weight_decay", "must be a finite value >= 0");
    if (steps < 1) throw ConfigError("optim.steps", "must be >= 1");
    if (batch_size < 1) throw ConfigError("optim.batch_size", "must be >= 1");
    if (!(poly_power > 0.0) || !std::isfinite(poly_power)) throw ConfigError("optim.poly_power", "must be > 0");
  }
};

/// SGD with momentum and L2 weight decay, same update rule as torch.optim.SGD
/// (no dampening, no Nesterov): the first step seeds the buffer with the raw
/// gradient.
class Sgd {
 public:
  Sgd(nn::ParamStore& store, const OptimConfig& cfg) : store_(&store), cfg_(cfg) {}

  void step() {
    for (auto& [key, p] : store_->params()) {
      if (!p.has_grad()) continue;
      Tensor& value = p.mutable_value();
      const Tensor& grad = p.grad();
      Tensor d = grad;
      if (cfg_.weight_decay != 0.0)
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += cfg_.weight_decay * value[i];
      if (cfg_.momentum != 0.0) {
        auto [it, fresh] = velocity_.try_emplace(key, d);
        if (!fresh) {
          Tensor& buf = it->second;
          for (std::size_t i = 0; i < d.size(); ++i) buf[i] = cfg_.momentum * buf[i] + d[i];
        }
        d = it->second;
      }
      for (std::size_t i = 0; i < d.size(); ++i) value[i] -= cfg_.lr * d[i];
    }
  }

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  nn::ParamStore* store_;
  OptimConfig cfg_;
  std::map<std::string, Tensor> velocity_;
};

enum class DepthTarget { sparse, dense };

inline std::string_view to_string(DepthTarget t) { return t == DepthTarget::sparse ? "sparse" : "dense"; }

/// Weights of the optimized objective. The depth term is in mm^2; the default
/// weight measures it in units of 10 m (the depth head's output scale), which
/// keeps it on the scale of the cross-entropy term. In m^2 it swamps the
/// semantic gradients and training diverges at the default lr.
struct LossConfig {
  double semantic_weight = 1.0;
  double depth_weight = 1e-8;
  DepthTarget depth_target = DepthTarget::sparse;
  std::optional<int> ignore_id;

  void validate() const {
    if (!(semantic_weight >= 0.0)) throw ConfigError("loss.semantic_weight", "must be >= 0");
    if (!(depth_weight >= 0.0)) throw ConfigError("loss.depth_weight", "must be >= 0");
  }
};

/// Loss terms of one sample. `objective` is the weighted sum that is
/// optimized; `semantic` and `depth` are the raw per-task losses.
struct SampleLoss {
  std::optional<nn::Var> semantic;
  std::optional<nn::Var> depth;
  nn::Var objective;
};

inline const Tensor& depth_target(const data::ImageSample& s, DepthTarget t) {
  if (t == DepthTarget::dense) {
    if (!s.has_dense_depth()) throw MissingInput("dense_depth_gt");
    return s.dense_depth_gt;
  }
  if (!s.has_sparse_depth()) throw MissingInput("sparse_depth");
  return s.sparse_depth;
}

inline SampleLoss variant_loss(const Model& model, const ModelOutput& out, const data::ImageSample& s,
                               const LossConfig& cfg) {
  SampleLoss l;
  std::vector<nn::Var> terms;
  if (out.semantic) {
    if (!s.has_semantic()) throw MissingInput("semantic_gt");
    l.semantic = semantic_loss(*out.semantic, s.semantic_gt, cfg.ignore_id);
    terms.push_back(nn::scale(*l.semantic, cfg.semantic_weight));
  }
  if (out.depth) {
    l.depth = depth_loss(*out.depth, depth_target(s, cfg.depth_target));
    terms.push_back(nn::scale(*l.depth, cfg.depth_weight));
  }
  if (terms.empty()) throw ShapeError("variant " + model.name() + " produced no outputs");
  l.objective = nn::add_n(terms);
  return l;
}

inline SampleLoss variant_loss(const Model& model, const data::ImageSample& s, const LossConfig& cfg) {
  return variant_loss(model, model.forward(s), s, cfg);
}

struct TrainLogEntry {
  long step = 0;
  std::optional<double> semantic_loss;
  std::optional<double> depth_loss;
  double joint_loss = 0.0;  // the weighted objective
  double lr = 0.0;

  bool operator==(const TrainLogEntry&) const = default;
};

inline nlohmann::json to_json(const TrainLogEntry& e) {
  nlohmann::json j{{"step", e.step}, {"joint_loss", e.joint_loss}, {"lr", e.lr}};
  j["semantic_loss"] = e.semantic_loss ? nlohmann::json(*e.semantic_loss) : nlohmann::json(nullptr);
  j["depth_loss"] = e.depth_loss ? nlohmann::json(*e.depth_loss) : nlohmann::json(nullptr);
  return j;
}

struct ValidationEntry {
  long step = 0;
  double objective = 0.0;
  bool operator==(const ValidationEntry&) const = default;
};

struct TrainOptions {
  OptimConfig optim;
  LossConfig loss;
  std::uint64_t seed = 0;
  /// Validate every N steps (and always after the last step); 0 = last step only.
  long val_every = 0;
  /// Draw a fresh sparse sample of the dense map every epoch.
  std::optional<data::SparsifyConfig> resample_sparse;
  /// When set, last.ckpt and best.ckpt are written here.
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const TrainLogEntry&)> on_step;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::vector<ValidationEntry> validation;
  long best_step = 0;
  double best_objective = 0.0;
  std::map<std::string, Tensor> best_params;
};

/// Mean objective over a split, without gradients.
inline double validation_objective(const Model& model, const std::vector<data::ImageSample>& split,
                                   const LossConfig& cfg) {
  if (split.empty()) throw EmptySplit("validation split is empty");
  nn::NoGradGuard ng;
  double sum = 0.0;
  for (const auto& s : split) sum += variant_loss(model, s, cfg).objective.value()[0];
  return sum / static_cast<double>(split.size());
}

/// Mini-batch SGD. Sample order is a seeded per-epoch shuffle; a batch's
/// gradient is the mean over its samples. The best-validation parameters are
/// kept in the result (train split is used when `val` is empty); the model is
/// left holding the last-step parameters.
inline TrainResult train(Model& model, const std::vector<data::ImageSample>& train_split,
                         const std::vector<data::ImageSample>& val_split, const TrainOptions& opt) {
  if (train_split.empty()) throw EmptySplit("training split is empty");
  opt.optim.validate();
  opt.loss.validate();
  const auto& val = val_split.empty() ? train_split : val_split;

  nn::ParamStore& store = model.params();
  Sgd sgd(store, opt.optim);
  Rng order_rng(mix_seed(opt.seed, "train-order"));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  long epoch = -1;
  std::vector<data::ImageSample> epoch_samples;

  auto next_sample = [&]() -> const data::ImageSample& {
    if (cursor == order.size()) {
      ++epoch;
      order.resize(train_split.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      order_rng.shuffle(order);
      cursor = 0;
      if (opt.resample_sparse) {
        epoch_samples = train_split;
        for (auto& s : epoch_samples) {
          data::SparsifyConfig sc = *opt.resample_sparse;
          sc.seed = data::sparsify_seed(sc.seed, s.sample_id, epoch);
          s.sparse_depth = data::sparsify_depth(s.dense_depth_gt, sc);
        }
      }
    }
    const std::size_t i = order[cursor++];
    return opt.resample_sparse ? epoch_samples[i] : train_split[i];
  };

  TrainResult result;
  result.best_objective = std::numeric_limits<double>::infinity();
  auto run_validation = [&](long step) {
    const double v = validation_objective(model, val, opt.loss);
    if (!std::isfinite(v)) throw Divergence(step);
    result.validation.push_back({step, v});
    if (v < result.best_objective) {
      result.best_objective = v;
      result.best_step = step;
      result.best_params = store.snapshot();
      if (opt.checkpoint_dir) store.save(*opt.checkpoint_dir / "best.ckpt");
    }
  };

  const double inv_batch = 1.0 / opt.optim.batch_size;
  for (long step = 1; step <= opt.optim.steps; ++step) {
    store.zero_grad();
    TrainLogEntry entry;
    entry.step = step;
    sgd.set_lr(opt.optim.lr_at(step));
    entry.lr = sgd.lr();
    double sem = 0.0, dep = 0.0, obj = 0.0;
    bool has_sem = false, has_dep = false;
    for (int b = 0; b < opt.optim.batch_size; ++b) {
      const data::ImageSample& s = next_sample();
      const SampleLoss l = variant_loss(model, s, opt.loss);
      const double o = l.objective.value()[0];
      if (!std::isfinite(o)) throw Divergence(step);
      obj += o;
      if (l.semantic) sem += l.semantic->value()[0], has_sem = true;
      if (l.depth) dep += l.depth->value()[0], has_dep = true;
      nn::backward(l.objective, inv_batch);
    }
    entry.joint_loss = obj * inv_batch;
    if (has_sem) entry.semantic_loss = sem * inv_batch;
    if (has_dep) entry.depth_loss = dep * inv_batch;
    sgd.step();
    result.log.push_back(entry);
    if (opt.on_step) opt.on_step(entry);
    if ((opt.val_every > 0 && step % opt.val_every == 0) || step == opt.optim.steps) run_validation(step);
  }
  if (opt.checkpoint_dir) store.save(*opt.checkpoint_dir / "last.ckpt");
  return result;
}

struct MetricsReport {
  std::string variant;
  std::optional<double> miou;
  std::optional<double> rmse_mm;
  long n_samples = 0;
  std::string config_digest;

  bool operator==(const MetricsReport&) const = default;
};

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"variant", r.variant},
          {"miou", r.miou ? nlohmann::json(*r.miou) : nlohmann::json(nullptr)},
          {"rmse_mm", r.rmse_mm ? nlohmann::json(*r.rmse_mm) : nlohmann::json(nullptr)},
          {"n_samples", r.n_samples},
          {"config_digest", r.config_digest}};
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.variant = j.at("variant").get<std::string>();
  if (!j.at("miou").is_null()) r.miou = j.at("miou").get<double>();
  if (!j.at("rmse_mm").is_null()) r.rmse_mm = j.at("rmse_mm").get<double>();
  r.n_samples = j.at("n_samples").get<long>();
  r.config_digest = j.at("config_digest").get<std::string>();
  return r;
}

struct EvalOptions {
  int num_classes = 0;
  std::optional<int> ignore_id;
  /// Depth pixels farther than this are not scored (same cut as the sparsifier).
  double max_range_mm = data::kDefaultMaxRangeMm;
  std::string config_digest;
};

/// Pixels with 0 < gt <= max_range.
inline std::vector<std::uint8_t> eval_depth_mask(const Tensor& gt_mm, double max_range_mm) {
  std::vector<std::uint8_t> mask(gt_mm.size());
  for (std::size_t i = 0; i < gt_mm.size(); ++i) mask[i] = gt_mm[i] > 0.0 && gt_mm[i] <= max_range_mm;
  return mask;
}

/// Pooled metrics over a split: one confusion matrix and one squared-error sum
/// for all samples. Depth is scored against the dense map when present, the
/// sparse map otherwise.
inline MetricsReport evaluate(const Predictor& model, const std::vector<data::ImageSample>& split,
                              const EvalOptions& opt) {
  if (split.empty()) throw EmptySplit("evaluation split is empty");
  ConfusionCounts confusion(opt.num_classes);
  DepthErrorSum depth_err;
  for (const auto& s : split) {
    const Prediction p = model.predict(s);
    if (p.semantic_logits) {
      if (!s.has_semantic()) throw MissingInput("semantic_gt");
      confusion.add(argmax_labels(*p.semantic_logits), s.semantic_gt, opt.ignore_id);
    }
    if (p.depth_mm) {
      const Tensor& gt = s.has_dense_depth() ? s.dense_depth_gt : depth_target(s, DepthTarget::sparse);
      depth_err.add(*p.depth_mm, gt, eval_depth_mask(gt, opt.max_range_mm));
    }
  }
  MetricsReport r;
  r.variant = model.name();
  if (model.emits_semantic()) r.miou = confusion.miou();
  if (model.emits_depth()) r.rmse_mm = depth_err.rmse();
  r.n_samples = static_cast<long>(split.size());
  r.config_digest = opt.config_digest;
  return r;
}

/// Published full-scale numbers, as printed.
struct ReferenceRow {
  std::string_view variant;
  std::string_view miou;
  std::string_view rmse_mm;
};

inline const std::array<ReferenceRow, 9>& reference_results() {
  static const std::array<ReferenceRow, 9> rows{{
      {"SemSegNet_b", "0.520", "-"},
      {"DepthNet_b", "-", "580.2"},
      {"SemNet_depth_gt", "0.542", "-"},
      {"SemNet_depth_dense_gt", "0.638", "-"},
      {"DepthNet_semantic_gt", "-", "833.7"},
      {"SemSeg_Depth_a", "0.5421", "1497.0"},
      {"SemSeg_Depth_b", "0.5463", "438.4"},
      {"SemSeg_Depth_c", "0.5841", "429.7"},
      {"SemSegDepth", "0.5932", "458.2"},
  }};
  return rows;
}

inline const ReferenceRow* find_reference(std::string_view variant) {
  for (const auto& r : reference_results())
    if (r.variant == variant) return &r;
  return nullptr;
}

inline constexpr std::string_view kReferenceFootnote =
    "Reference values come from full-scale training on Virtual KITTI 2 at 200x1000 and are not expected to match "
    "desk-scale runs.";

struct AblationRow {
  std::string variant;
  std::optional<MetricsReport> report;
  std::optional<std::string> error;  // "Kind: message" when the variant failed
  std::optional<TrainLogEntry> final_step;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  OptimConfig optim;
  LossConfig loss;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_eval = 0;
  std::uint64_t seed = 0;
};

/// Variant names sorted into registry (table) order; throws UnknownVariant.
inline std::vector<std::string> in_table_order(const std::vector<std::string>& names) {
  for (const auto& n : names) find_variant(n);
  std::vector<std::string> out;
  for (const auto& v : variant_table())
    if (std::find(names.begin(), names.end(), v.name) != names.end()) out.emplace_back(v.name);
  return out;
}

/// Trains and evaluates each variant under the same data, optimizer budget
/// and seed. A variant that throws is recorded and the run continues.
inline AblationResult run_ablation(const std::vector<std::string>& variants, const ModelConfig& cfg,
                                   const std::vector<data::ImageSample>& train_split,
                                   const std::vector<data::ImageSample>& val_split,
                                   const std::vector<data::ImageSample>& eval_split, const TrainOptions& opt,
                                   const EvalOptions& eval_opt,
                                   const std::function<void(const AblationRow&)>& on_row = {}) {
  AblationResult res;
  res.optim = opt.optim;
  res.loss = opt.loss;
  res.n_train = train_split.size();
  res.n_val = val_split.size();
  res.n_eval = eval_split.size();
  res.seed = opt.seed;
  for (const auto& name : in_table_order(variants)) {
    AblationRow row;
    row.variant = name;
    try {
      Model model = build_variant(name, cfg, opt.seed);
      TrainResult tr = train(model, train_split, val_split, opt);
      if (!tr.log.empty()) row.final_step = tr.log.back();
      model.params().restore(tr.best_params);
      row.report = evaluate(model, eval_split, eval_opt);
    } catch (const Error& e) {
      row.error = e.kind() + ": " + e.what();
    }
    if (on_row) on_row(row);
    res.rows.push_back(std::move(row));
  }
  return res;
}

inline std::string format_metric(const std::optional<double>& v, int precision) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

/// Markdown table in registry order with the published values alongside.
inline std::string render_ablation_table(const AblationResult& r) {
  std::ostringstream os;
  os << "| Variant | mIoU | RMSE (mm) | Reference mIoU* | Reference RMSE (mm)* |\n";
  os << "|---|---|---|---|---|\n";
  for (const auto& row : r.rows) {
    const ReferenceRow* ref = find_reference(row.variant);
    os << "| " << row.variant << " | ";
    if (row.error) {
      os << "failed | failed";
    } else {
      os << format_metric(row.report->miou, 4) << " | " << format_metric(row.report->rmse_mm, 1);
    }
    os << " | " << (ref ? ref->miou : "-") << " | " << (ref ? ref->rmse_mm : "-") << " |\n";
  }
  os << "\nEqual budget for every variant: " << r.optim.steps << " steps, batch " << r.optim.batch_size
     << ", lr " << r.optim.lr << (r.optim.schedule == LrSchedule::poly ? " (poly decay)" : "") << ", momentum " << r.optim.momentum << ", weight decay " << r.optim.weight_decay
     << ", seed " << r.seed << "; " << r.n_train << " train / " << r.n_val << " val / " << r.n_eval
     << " eval samples; depth supervised on " << to_string(r.loss.depth_target)
     << " ground truth; loss = " << r.loss.semantic_weight << " * semantic + " << r.loss.depth_weight
     << " * depth (mm^2).\n";
  for (const auto& row : r.rows)
    if (row.error) os << "\n" << row.variant << " failed: " << *row.error << "\n";
  os << "\n* " << kReferenceFootnote << "\n";
  return os.str();
}

}  // namespace semsegdepth
