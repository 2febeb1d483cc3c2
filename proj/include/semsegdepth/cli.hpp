#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "semsegdepth/config.hpp"
#include "semsegdepth/report.hpp"

namespace semsegdepth::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfigError = 1, kRuntimeError = 2, kDivergence = 3 };

struct GenerateOptions {
  std::size_t n_samples = 20;
  std::uint64_t seed = 0;
  fs::path out_dir = "data/toy";
  int num_classes = 4;
  int height = 64;
  int width = 64;
};

/// Writes a toy dataset in the directory layout with a proportional split.
/// Same options, same bytes.
inline void generate_data(const GenerateOptions& o) {
  if (o.num_classes < 2) throw ConfigError("num_classes", "must be >= 2");
  if (o.height < 16 || o.width < 16) throw ConfigError("height/width", "must be >= 16");
  fs::create_directories(o.out_dir);
  data::DatasetMeta meta;
  meta.num_classes = o.num_classes;
  meta.class_map = data::default_class_map(o.num_classes);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < o.n_samples; ++i) {
    const auto s = data::make_toy_sample(i, o.seed, o.num_classes, o.height, o.width, data::SparsifyConfig{});
    if (i == 0) meta.intrinsics = s.intrinsics;
    data::write_sample(o.out_dir, s);
    ids.push_back(s.sample_id);
  }
  data::write_meta(o.out_dir, meta);
  data::write_split_file(o.out_dir / "split.txt",
                         data::split_dataset(ids, data::proportional_counts(ids.size()), o.seed));
}

/// Command-line values that override the config file.
struct Overrides {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::vector<std::string> variants;
};

inline RunConfig resolve_config(const Overrides& o, bool variants_are_ablation = false) {
  RunConfig c = o.config_path ? load_run_config(*o.config_path) : parse_run_config(nlohmann::json::object());
  if (o.seed) c.seed = *o.seed;
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (!o.variants.empty()) {
    if (variants_are_ablation) c.ablation_variants = o.variants;
    else if (o.variants.size() == 1) c.variant = o.variants.front();
    else throw ConfigError("variant", "only one --variant allowed here");
  }
  validate(c);
  return c;
}

/// Creates the run directory and freezes the materialized config into it.
inline fs::path prepare_run_dir(const RunConfig& c) {
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  save_run_config(dir / "config.json", c);
  return dir;
}

inline EvalOptions eval_options(const RunConfig& c, int num_classes) {
  EvalOptions e;
  e.num_classes = num_classes;
  e.ignore_id = c.loss.ignore_id;
  e.max_range_mm = c.data.sparsify.max_range_mm;
  e.config_digest = config_digest(c);
  return e;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

inline std::string metrics_table(const MetricsReport& r) {
  return report::render_comparison_table({report::RunSummary{".", r, std::nullopt}});
}

/// Prints a progress line every `every` steps.
inline std::function<void(const TrainLogEntry&)> progress_printer(std::ostream& os, long every, std::string prefix) {
  return [&os, every, prefix = std::move(prefix)](const TrainLogEntry& e) {
    if (e.step == 1 || e.step % every == 0)
      os << prefix << "step " << e.step << " joint_loss " << e.joint_loss << '\n' << std::flush;
  };
}

struct TrainOutcome {
  fs::path run_dir;
  TrainResult result;
  std::optional<MetricsReport> metrics;  // on the test split (val if test is empty), best params
};

/// Trains `c.variant` and writes config.json, train_log.jsonl,
/// validation.jsonl, last.ckpt, best.ckpt, loss_curves.png and, when there is
/// held-out data, report.json / report.md.
inline TrainOutcome cmd_train(const RunConfig& c, std::ostream& progress) {
  if (c.variant == "gt-stub") throw ConfigError("variant", "gt-stub has nothing to train");
  const fs::path dir = prepare_run_dir(c);
  const LoadedData d = load_data(c);
  ModelConfig mc = c.model;
  mc.num_classes = d.num_classes;
  Model model = build_variant(c.variant, mc, c.seed);

  TrainOptions opt = c.train_options();
  opt.checkpoint_dir = dir;
  opt.on_step = progress_printer(progress, std::max(1L, c.optim.steps / 20), "");
  TrainOutcome out{dir, {}, std::nullopt};
  out.result = train(model, d.train, d.val, opt);
  report::write_train_log(dir / "train_log.jsonl", out.result.log);
  {
    std::ofstream os(dir / "validation.jsonl");
    for (const auto& v : out.result.validation)
      os << nlohmann::json{{"step", v.step}, {"objective", v.objective}}.dump() << '\n';
  }
  report::plot_loss_curves(dir / "loss_curves.png", out.result.log);

  const auto& held_out = !d.test.empty() ? d.test : d.val;
  if (!held_out.empty()) {
    model.params().restore(out.result.best_params);
    out.metrics = evaluate(model, held_out, eval_options(c, d.num_classes));
    write_json(dir / "report.json", to_json(*out.metrics));
    write_text(dir / "report.md", metrics_table(*out.metrics));
  }
  return out;
}

/// Scores a checkpoint (default `<out_dir>/best.ckpt`) on the test split. The
/// gt-stub variant needs no checkpoint. Writes evaluation.json and
/// evaluation.md into the run directory without touching anything else.
inline MetricsReport cmd_evaluate(const RunConfig& c, const std::optional<fs::path>& checkpoint) {
  const LoadedData d = load_data(c);
  const EvalOptions eo = eval_options(c, d.num_classes);
  MetricsReport r;
  if (c.variant == "gt-stub") {
    r = evaluate(GroundTruthStub(d.num_classes), d.test, eo);
  } else {
    ModelConfig mc = c.model;
    mc.num_classes = d.num_classes;
    Model model = build_variant(c.variant, mc, c.seed);
    model.load(checkpoint.value_or(fs::path(c.out_dir) / "best.ckpt"));
    r = evaluate(model, d.test, eo);
  }
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  if (!fs::exists(dir / "config.json")) save_run_config(dir / "config.json", c);
  write_json(dir / "evaluation.json", to_json(r));
  write_text(dir / "evaluation.md", metrics_table(r));
  return r;
}

/// Trains and scores every listed variant on the same data and budget;
/// writes ablation.json and ablation.md.
inline AblationResult cmd_ablate(const RunConfig& c, std::ostream& progress) {
  const fs::path dir = prepare_run_dir(c);
  const LoadedData d = load_data(c);
  ModelConfig mc = c.model;
  mc.num_classes = d.num_classes;
  TrainOptions opt = c.train_options();
  opt.on_step = progress_printer(progress, std::max(1L, c.optim.steps / 5), "  ");
  const auto& eval_split = !d.test.empty() ? d.test : d.val;
  const auto result = run_ablation(c.ablation_list(), mc, d.train, d.val, eval_split, opt,
                                   eval_options(c, d.num_classes), [&](const AblationRow& row) {
                                     progress << row.variant << ": "
                                              << (row.error ? *row.error : "done") << '\n'
                                              << std::flush;
                                   });
  write_json(dir / "ablation.json", report::to_json(result));
  write_text(dir / "ablation.md", render_ablation_table(result));
  return result;
}

/// Collects report.json / evaluation.json from each run directory into one
/// comparison table, draws loss_curves.png for every run with a training log
/// and re-renders any ablation table found. Output goes to `out_dir`.
inline std::string cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw ConfigError("run_dirs", "at least one run directory is required");
  for (const auto& dir : run_dirs)
    if (!fs::is_directory(dir)) throw MissingFile("no run directory " + dir.string());
  fs::create_directories(out_dir);
  std::vector<report::RunSummary> runs;
  std::string ablations;
  for (const auto& dir : run_dirs) {
    std::optional<TrainLogEntry> last;
    if (fs::exists(dir / "train_log.jsonl")) {
      const auto log = report::read_train_log(dir / "train_log.jsonl");
      if (!log.empty()) last = log.back();
      const std::string name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
      report::plot_loss_curves(out_dir / (name + "_loss_curves.png"), log);
    }
    for (const char* file : {"report.json", "evaluation.json"}) {
      if (!fs::exists(dir / file)) continue;
      std::ifstream is(dir / file);
      runs.push_back({dir.string(), metrics_from_json(nlohmann::json::parse(is)), last});
      break;
    }
    if (fs::exists(dir / "ablation.json")) {
      std::ifstream is(dir / "ablation.json");
      ablations += "\n## Ablation: " + dir.string() + "\n\n" + render_ablation_table(report::ablation_from_json(nlohmann::json::parse(is)));
    }
  }
  std::string md = "# Run comparison\n\n";
  md += runs.empty() ? std::string("No single-variant reports found.\n") : report::render_comparison_table(runs);
  md += ablations;
  write_text(out_dir / "report.md", md);
  return md;
}

/// JSON error record for stderr.
inline nlohmann::json error_record(const std::exception& e, int exit_code) {
  nlohmann::json j{{"exit_code", exit_code}, {"message", e.what()}};
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    j["error"] = err->kind();
    if (const auto* ce = dynamic_cast<const ConfigError*>(&e)) j["key_path"] = ce->key_path();
    if (const auto* mi = dynamic_cast<const MissingInput*>(&e)) j["field"] = mi->field();
    if (const auto* dv = dynamic_cast<const Divergence*>(&e)) j["step"] = dv->step();
  } else {
    j["error"] = "RuntimeError";
  }
  return j;
}

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const Divergence*>(&e)) return kDivergence;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UnknownVariant*>(&e)) return kConfigError;
  return kRuntimeError;
}

/// Entry point shared by the binary and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Joint semantic segmentation and depth completion: data, training, evaluation, ablation."};
  app.require_subcommand(1);

  GenerateOptions gen;
  std::string gen_out = gen.out_dir.string();
  auto* g = app.add_subcommand("generate-data", "Write a toy dataset directory with a split file");
  g->add_option("--n", gen.n_samples, "Number of samples")->capture_default_str();
  g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  g->add_option("--out", gen_out, "Output directory")->capture_default_str();
  g->add_option("--num-classes", gen.num_classes, "Number of classes")->capture_default_str();
  g->add_option("--height", gen.height, "Image height")->capture_default_str();
  g->add_option("--width", gen.width, "Image width")->capture_default_str();

  Overrides ov;
  std::optional<std::string> checkpoint;
  std::vector<std::string> run_dirs;
  std::string report_out = "report";
  auto add_common = [&](CLI::App* sub, bool multi_variant) {
    sub->add_option("--config", ov.config_path, "Run config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", ov.seed, "Override the config seed");
    sub->add_option("--out", ov.out_dir, "Override the output directory");
    auto* v = sub->add_option("--variant", ov.variants, multi_variant ? "Variants to include (repeatable)" : "Variant name");
    if (!multi_variant) v->expected(1);
  };
  auto* t = app.add_subcommand("train", "Train one variant");
  add_common(t, false);
  auto* e = app.add_subcommand("evaluate", "Evaluate a checkpoint (or gt-stub) on the test split");
  add_common(e, false);
  e->add_option("--checkpoint", checkpoint, "Checkpoint file (default <out>/best.ckpt)");
  auto* a = app.add_subcommand("ablate", "Train and evaluate several variants under one budget");
  add_common(a, true);
  auto* r = app.add_subcommand("report", "Comparison table and loss-curve plots from run directories");
  r->add_option("run_dirs", run_dirs, "Run directories")->required();
  r->add_option("--out", report_out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    if (pe.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << nlohmann::json{{"error", "UsageError"}, {"message", pe.what()}, {"exit_code", int(kConfigError)}}.dump() << '\n';
    return kConfigError;
  }

  try {
    if (g->parsed()) {
      gen.out_dir = gen_out;
      generate_data(gen);
      out << "wrote " << gen.n_samples << " samples to " << gen.out_dir.string() << '\n';
    } else if (t->parsed()) {
      const auto res = cmd_train(resolve_config(ov), err);
      out << "run directory: " << res.run_dir.string() << '\n';
      if (res.metrics) out << metrics_table(*res.metrics);
    } else if (e->parsed()) {
      const auto c = resolve_config(ov);
      const auto rep = cmd_evaluate(c, checkpoint ? std::optional<fs::path>(*checkpoint) : std::nullopt);
      out << to_json(rep).dump() << "\n\n" << metrics_table(rep);
    } else if (a->parsed()) {
      const auto res = cmd_ablate(resolve_config(ov, true), err);
      out << render_ablation_table(res);
    } else if (r->parsed()) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      out << cmd_report(dirs, report_out);
    }
  } catch (const std::exception& ex) {
    const int code = exit_code_for(ex);
    err << error_record(ex, code).dump() << '\n';
    return code;
  }
  return kOk;
}

}  // namespace semsegdepth::cli
