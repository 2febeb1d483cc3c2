#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "semsegdepth/data/dataset_dir.hpp"
#include "semsegdepth/harness.hpp"

namespace semsegdepth {

inline constexpr const char* kDataRootEnv = "SEMSEGDEPTH_DATA_ROOT";

/// Where samples come from: an on-disk dataset directory, or toy scenes
/// generated in memory.
enum class DataSource { directory, toy };

struct ToyDataConfig {
  long n_samples = 16;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 0;
};

struct CropConfig {
  int height = 0;  // 0 keeps the full frame
  int width = 0;
  int row = 0;
  int col = 0;

  bool enabled() const { return height > 0 && width > 0; }
};

struct DataConfig {
  DataSource source = DataSource::toy;
  std::string root;  // directory source; falls back to $SEMSEGDEPTH_DATA_ROOT
  int num_classes = 4;
  ToyDataConfig toy;
  /// Split sizes for toy data; directory data uses its split file.
  data::SplitCounts split{10, 2, 4};
  CropConfig crop;
  data::SparsifyConfig sparsify;
  bool resample_sparse_each_epoch = false;
};

enum class ModelPreset { micro, full };

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  std::string variant = "SemSegDepth";
  DataConfig data;
  ModelPreset preset = ModelPreset::micro;
  ModelConfig model = ModelConfig::micro(4);
  OptimConfig optim;
  LossConfig loss;
  long val_every = 0;
  std::vector<std::string> ablation_variants;  // empty = all nine

  TrainOptions train_options() const {
    TrainOptions o;
    o.optim = optim;
    o.loss = loss;
    o.seed = seed;
    o.val_every = val_every;
    if (data.resample_sparse_each_epoch) o.resample_sparse = data.sparsify;
    return o;
  }

  std::vector<std::string> ablation_list() const {
    if (!ablation_variants.empty()) return ablation_variants;
    std::vector<std::string> all;
    for (const auto& v : variant_table()) all.emplace_back(v.name);
    return all;
  }
};

namespace detail {

/// Walks one JSON object, remembering which keys were read so that leftovers
/// can be reported with their full dotted path.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string path_of(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void get(const std::string& key, T& out) {
    const nlohmann::json* v = find(key);
    if (!v) return;
    if (const char* expected = type_mismatch<T>(*v)) throw ConfigError(path_of(key), std::string("expected ") + expected);
    try {
      out = v->get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_of(key), std::string("wrong type: ") + e.what());
    }
  }

  template <class F>
  void child(const std::string& key, F&& body) {
    static const nlohmann::json empty = nlohmann::json::object();
    const nlohmann::json* v = find(key);
    ObjectReader r(v ? *v : empty, path_of(key));
    body(r);
    r.finish();
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError(path_of(k), "unknown key");
  }

 private:
  /// nlohmann converts silently between number kinds; reject that here.
  template <class T>
  static const char* type_mismatch(const nlohmann::json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return "true or false";
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return "a number";
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) return "a non-negative integer";
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return "an integer";
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return "a string";
    }
    return nullptr;
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class E>
E parse_enum(const std::string& path, const std::string& text, std::initializer_list<std::pair<const char*, E>> options) {
  std::string names;
  for (const auto& [name, value] : options) {
    if (text == name) return value;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError(path, "'" + text + "' is not one of: " + names);
}

}  // namespace detail

inline std::string_view to_string(DataSource s) { return s == DataSource::toy ? "toy" : "directory"; }
inline std::string_view to_string(ModelPreset p) { return p == ModelPreset::micro ? "micro" : "full"; }

/// Parses a run config. Unknown keys and wrong types raise ConfigError with
/// the dotted key path; omitted keys take defaults. `model.preset` picks the
/// base model config that the other `model.*` keys then override.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::ObjectReader;
  RunConfig c;
  ObjectReader root(j, "");
  root.get("seed", c.seed);
  root.get("out_dir", c.out_dir);
  root.get("variant", c.variant);

  root.child("data", [&](ObjectReader& d) {
    std::string source(to_string(c.data.source));
    d.get("source", source);
    c.data.source = detail::parse_enum<DataSource>(d.path_of("source"), source,
                                                   {{"toy", DataSource::toy}, {"directory", DataSource::directory}});
    d.get("root", c.data.root);
    d.get("num_classes", c.data.num_classes);
    d.child("toy", [&](ObjectReader& t) {
      t.get("n_samples", c.data.toy.n_samples);
      t.get("height", c.data.toy.height);
      t.get("width", c.data.toy.width);
      t.get("seed", c.data.toy.seed);
    });
    d.child("split", [&](ObjectReader& s) {
      s.get("train", c.data.split.train);
      s.get("val", c.data.split.val);
      s.get("test", c.data.split.test);
    });
    d.child("crop", [&](ObjectReader& cr) {
      cr.get("height", c.data.crop.height);
      cr.get("width", c.data.crop.width);
      cr.get("row", c.data.crop.row);
      cr.get("col", c.data.crop.col);
    });
    d.child("sparsify", [&](ObjectReader& s) {
      s.get("max_range_mm", c.data.sparsify.max_range_mm);
      s.get("n_points", c.data.sparsify.n_points);
      s.get("seed", c.data.sparsify.seed);
    });
    d.get("resample_sparse_each_epoch", c.data.resample_sparse_each_epoch);
  });

  root.child("model", [&](ObjectReader& m) {
    std::string preset(to_string(c.preset));
    m.get("preset", preset);
    c.preset = detail::parse_enum<ModelPreset>(m.path_of("preset"), preset,
                                               {{"micro", ModelPreset::micro}, {"full", ModelPreset::full}});
    c.model = c.preset == ModelPreset::micro ? ModelConfig::micro(c.data.num_classes)
                                             : ModelConfig::full(c.data.num_classes);
    m.get("max_range_mm", c.model.max_range_mm);
    m.child("backbone", [&](ObjectReader& b) {
      b.get("width_multiplier", c.model.backbone.width_multiplier);
      std::vector<int> blocks(c.model.backbone.stage_block_counts.begin(), c.model.backbone.stage_block_counts.end());
      b.get("stage_block_counts", blocks);
      if (blocks.size() != 4) throw ConfigError(b.path_of("stage_block_counts"), "expected 4 entries");
      std::copy(blocks.begin(), blocks.end(), c.model.backbone.stage_block_counts.begin());
      b.get("fpn_channels", c.model.backbone.fpn_channels);
    });
    m.child("semantic", [&](ObjectReader& s) { s.get("channels", c.model.semantic.channels); });
    m.child("depth", [&](ObjectReader& d) {
      d.get("output_scale_mm", c.model.depth.output_scale_mm);
      d.get("raw_semantic_logits", c.model.depth.raw_semantic_logits);
    });
    m.child("fuse", [&](ObjectReader& f) {
      f.get("n_blocks", c.model.depth.fuse.n_blocks);
      f.get("knn_k", c.model.depth.fuse.knn_k);
      f.get("kernel_mlp_widths", c.model.depth.fuse.kernel_mlp_widths);
      f.get("channels_2d", c.model.depth.fuse.channels_2d);
    });
    m.child("joint", [&](ObjectReader& jh) {
      jh.get("hidden_channels", c.model.joint.hidden_channels);
      jh.get("hidden_layers", c.model.joint.hidden_layers);
      jh.get("stop_depth_gradient", c.model.joint.stop_depth_gradient);
    });
  });
  c.model.num_classes = c.data.num_classes;

  root.child("optim", [&](ObjectReader& o) {
    o.get("lr", c.optim.lr);
    o.get("momentum", c.optim.momentum);
    o.get("weight_decay", c.optim.weight_decay);
    o.get("steps", c.optim.steps);
    o.get("batch_size", c.optim.batch_size);
    std::string schedule(to_string(c.optim.schedule));
    o.get("schedule", schedule);
    c.optim.schedule = detail::parse_enum<LrSchedule>(o.path_of("schedule"), schedule,
                                                      {{"constant", LrSchedule::constant}, {"poly", LrSchedule::poly}});
    o.get("poly_power", c.optim.poly_power);
  });
  root.child("loss", [&](ObjectReader& l) {
    l.get("semantic_weight", c.loss.semantic_weight);
    l.get("depth_weight", c.loss.depth_weight);
    std::string target(to_string(c.loss.depth_target));
    l.get("depth_target", target);
    c.loss.depth_target = detail::parse_enum<DepthTarget>(l.path_of("depth_target"), target,
                                                          {{"sparse", DepthTarget::sparse}, {"dense", DepthTarget::dense}});
    if (const auto* v = l.find("ignore_id"); v && !v->is_null()) {
      if (!v->is_number_integer()) throw ConfigError(l.path_of("ignore_id"), "expected an integer or null");
      c.loss.ignore_id = v->get<int>();
    }
  });
  root.child("train", [&](ObjectReader& t) { t.get("val_every", c.val_every); });
  root.child("ablation", [&](ObjectReader& a) { a.get("variants", c.ablation_variants); });
  root.finish();
  return c;
}

/// Semantic checks that need the whole config.
inline void validate(const RunConfig& c) {
  if (c.variant != "gt-stub") {
    try {
      find_variant(c.variant);
    } catch (const UnknownVariant& e) {
      throw ConfigError("variant", e.what());
    }
  }
  for (std::size_t i = 0; i < c.ablation_variants.size(); ++i) {
    try {
      find_variant(c.ablation_variants[i]);
    } catch (const UnknownVariant& e) {
      throw ConfigError("ablation.variants[" + std::to_string(i) + "]", e.what());
    }
  }
  if (c.data.num_classes < 2) throw ConfigError("data.num_classes", "must be >= 2");
  if (c.data.source == DataSource::toy) {
    if (c.data.toy.n_samples < 0) throw ConfigError("data.toy.n_samples", "must be >= 0");
    if (c.data.toy.height < 16) throw ConfigError("data.toy.height", "must be >= 16");
    if (c.data.toy.width < 16) throw ConfigError("data.toy.width", "must be >= 16");
    const auto need = c.data.split.train + c.data.split.val + c.data.split.test;
    if (need > static_cast<std::size_t>(c.data.toy.n_samples))
      throw ConfigError("data.split", "asks for " + std::to_string(need) + " samples, toy set has " +
                                          std::to_string(c.data.toy.n_samples));
  }
  if (c.data.crop.height < 0 || c.data.crop.width < 0 || c.data.crop.row < 0 || c.data.crop.col < 0)
    throw ConfigError("data.crop", "fields must be >= 0");
  if (c.data.sparsify.n_points < 1) throw ConfigError("data.sparsify.n_points", "must be >= 1");
  if (!(c.data.sparsify.max_range_mm > 0.0)) throw ConfigError("data.sparsify.max_range_mm", "must be > 0");
  auto model_check = [](const char* path, auto&& fn) {
    try {
      fn();
    } catch (const ShapeError& e) {
      throw ConfigError(path, e.what());
    }
  };
  model_check("model.backbone", [&] { c.model.backbone.validate(); });
  model_check("model.semantic", [&] { c.model.semantic.validate(); });
  model_check("model.fuse", [&] { c.model.depth.fuse.validate(); });
  model_check("model.joint", [&] { c.model.joint.validate(); });
  if (!(c.model.max_range_mm > 0.0)) throw ConfigError("model.max_range_mm", "must be > 0");
  if (!(c.model.depth.output_scale_mm > 0.0)) throw ConfigError("model.depth.output_scale_mm", "must be > 0");
  c.optim.validate();
  c.loss.validate();
  if (c.val_every < 0) throw ConfigError("train.val_every", "must be >= 0");
}

/// Every field written out, defaults included; parse_run_config of this is
/// the identity.
inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  const auto& m = c.model;
  return json{
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"variant", c.variant},
      {"data",
       {{"source", to_string(c.data.source)},
        {"root", c.data.root},
        {"num_classes", c.data.num_classes},
        {"toy",
         {{"n_samples", c.data.toy.n_samples},
          {"height", c.data.toy.height},
          {"width", c.data.toy.width},
          {"seed", c.data.toy.seed}}},
        {"split", {{"train", c.data.split.train}, {"val", c.data.split.val}, {"test", c.data.split.test}}},
        {"crop",
         {{"height", c.data.crop.height}, {"width", c.data.crop.width}, {"row", c.data.crop.row}, {"col", c.data.crop.col}}},
        {"sparsify",
         {{"max_range_mm", c.data.sparsify.max_range_mm},
          {"n_points", c.data.sparsify.n_points},
          {"seed", c.data.sparsify.seed}}},
        {"resample_sparse_each_epoch", c.data.resample_sparse_each_epoch}}},
      {"model",
       {{"preset", to_string(c.preset)},
        {"max_range_mm", m.max_range_mm},
        {"backbone",
         {{"width_multiplier", m.backbone.width_multiplier},
          {"stage_block_counts", m.backbone.stage_block_counts},
          {"fpn_channels", m.backbone.fpn_channels}}},
        {"semantic", {{"channels", m.semantic.channels}}},
        {"depth", {{"output_scale_mm", m.depth.output_scale_mm}, {"raw_semantic_logits", m.depth.raw_semantic_logits}}},
        {"fuse",
         {{"n_blocks", m.depth.fuse.n_blocks},
          {"knn_k", m.depth.fuse.knn_k},
          {"kernel_mlp_widths", m.depth.fuse.kernel_mlp_widths},
          {"channels_2d", m.depth.fuse.channels_2d}}},
        {"joint",
         {{"hidden_channels", m.joint.hidden_channels},
          {"hidden_layers", m.joint.hidden_layers},
          {"stop_depth_gradient", m.joint.stop_depth_gradient}}}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"momentum", c.optim.momentum},
        {"weight_decay", c.optim.weight_decay},
        {"steps", c.optim.steps},
        {"batch_size", c.optim.batch_size},
        {"schedule", to_string(c.optim.schedule)},
        {"poly_power", c.optim.poly_power}}},
      {"loss",
       {{"semantic_weight", c.loss.semantic_weight},
        {"depth_weight", c.loss.depth_weight},
        {"depth_target", to_string(c.loss.depth_target)},
        {"ignore_id", c.loss.ignore_id ? json(*c.loss.ignore_id) : json(nullptr)}}},
      {"train", {{"val_every", c.val_every}}},
      {"ablation", {{"variants", c.ablation_list()}}},
  };
}

/// Hex FNV-1a of the materialized config. The output directory is left out
/// so that a rerun elsewhere carries the same digest.
inline std::string config_digest(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("out_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("<file>", "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("malformed JSON: ") + e.what());
  }
  return parse_run_config(j);
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << to_json(c).dump(2) << '\n';
}

/// Samples of one run, already cropped and sparsified.
struct LoadedData {
  std::vector<data::ImageSample> train;
  std::vector<data::ImageSample> val;
  std::vector<data::ImageSample> test;
  int num_classes = 0;
  std::size_t unknown_color_pixels = 0;
};

inline std::string resolve_data_root(const DataConfig& d) {
  if (!d.root.empty()) return d.root;
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  throw ConfigError("data.root", std::string("not set and $") + kDataRootEnv + " is empty");
}

inline LoadedData load_data(const RunConfig& c) {
  LoadedData out;
  auto prepare = [&](data::ImageSample s) {
    if (c.data.crop.enabled()) s = data::crop_sample(s, c.data.crop.height, c.data.crop.width, {c.data.crop.row, c.data.crop.col});
    if (!s.has_sparse_depth()) {
      data::SparsifyConfig sc = c.data.sparsify;
      sc.seed = data::sparsify_seed(sc.seed, s.sample_id);
      s.sparse_depth = data::sparsify_depth(s.dense_depth_gt, sc);
    }
    return s;
  };
  if (c.data.source == DataSource::toy) {
    out.num_classes = c.data.num_classes;
    std::vector<std::string> ids;
    for (long i = 0; i < c.data.toy.n_samples; ++i) ids.push_back(data::toy_sample_id(static_cast<std::size_t>(i)));
    const auto split = data::split_dataset(ids, c.data.split, c.seed);
    auto make = [&](const std::vector<std::string>& names) {
      std::vector<data::ImageSample> v;
      for (const auto& id : names) {
        const auto index = static_cast<std::size_t>(std::stoul(id));
        v.push_back(prepare(data::make_toy_sample(index, c.data.toy.seed, c.data.num_classes, c.data.toy.height,
                                                  c.data.toy.width, c.data.sparsify)));
      }
      return v;
    };
    out.train = make(split.train);
    out.val = make(split.val);
    out.test = make(split.test);
    return out;
  }
  const std::filesystem::path root = resolve_data_root(c.data);
  const auto meta = data::read_meta(root);
  if (meta.num_classes != c.data.num_classes)
    throw ConfigError("data.num_classes", "config says " + std::to_string(c.data.num_classes) + ", dataset has " +
                                              std::to_string(meta.num_classes));
  out.num_classes = meta.num_classes;
  const auto split = data::read_split_file(root / "split.txt");
  auto read = [&](const std::vector<std::string>& names) {
    std::vector<data::ImageSample> v;
    for (const auto& id : names) {
      auto r = data::read_sample(root, id, meta);
      out.unknown_color_pixels += r.unknown_color_pixels;
      v.push_back(prepare(std::move(r.sample)));
    }
    return v;
  };
  out.train = read(split.train);
  out.val = read(split.val);
  out.test = read(split.test);
  return out;
}

}  // namespace semsegdepth
