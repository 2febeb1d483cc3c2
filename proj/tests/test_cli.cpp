#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "semsegdepth/cli.hpp"

using namespace semsegdepth;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = 0;
  std::string out, err;
};

CliRun run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "semsegdepth");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("semsegdepth_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

nlohmann::json last_error(const CliRun& r) {
  auto s = r.err;
  while (!s.empty() && s.back() == '\n') s.pop_back();
  return nlohmann::json::parse(s.substr(s.rfind('\n') == std::string::npos ? 0 : s.rfind('\n') + 1));
}

/// A quick micro config over generated toy data.
nlohmann::json small_config(const fs::path& data_root, const fs::path& out, long steps = 3) {
  return {{"data", {{"source", "directory"}, {"root", data_root.string()}}},
          {"optim", {{"steps", steps}, {"lr", 0.004}}},
          {"out_dir", out.string()},
          {"variant", "SemSegNet_b"}};
}

}  // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
  const RunConfig c = parse_run_config(nlohmann::json::object());
  EXPECT_EQ(c.variant, "SemSegDepth");
  EXPECT_EQ(c.optim.lr, OptimConfig{}.lr);
  EXPECT_EQ(c.ablation_list().size(), 9u);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, UnknownKeysNameTheirPath) {
  for (const auto& [doc, path] : std::vector<std::pair<std::string, std::string>>{
           {R"({"optim":{"lrr":0.1}})", "optim.lrr"},
           {R"({"sed":1})", "sed"},
           {R"({"model":{"fuse":{"knn":3}}})", "model.fuse.knn"},
           {R"({"data":{"crop":{"hieght":8}}})", "data.crop.hieght"}}) {
    try {
      parse_run_config(nlohmann::json::parse(doc));
      ADD_FAILURE() << doc;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.key_path(), path);
    }
  }
}

TEST(Config, WrongTypesNameTheirPath) {
  for (const auto& [doc, path] : std::vector<std::pair<std::string, std::string>>{
           {R"({"optim":{"steps":"many"}})", "optim.steps"},
           {R"({"optim":{"steps":2.5}})", "optim.steps"},
           {R"({"seed":-1})", "seed"},
           {R"({"data":{"resample_sparse_each_epoch":1}})", "data.resample_sparse_each_epoch"},
           {R"({"loss":{"depth_target":"both"}})", "loss.depth_target"},
           {R"({"model":{"preset":"large"}})", "model.preset"},
           {R"({"optim":[]})", "optim"}}) {
    try {
      parse_run_config(nlohmann::json::parse(doc));
      ADD_FAILURE() << doc;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.key_path(), path) << doc;
    }
  }
}

TEST(Config, SemanticChecksNameTheirPath) {
  auto path_of = [](const std::string& doc) {
    try {
      validate(parse_run_config(nlohmann::json::parse(doc)));
    } catch (const ConfigError& e) {
      return e.key_path();
    }
    return std::string("<none>");
  };
  EXPECT_EQ(path_of(R"({"optim":{"lr":-1}})"), "optim.lr");
  EXPECT_EQ(path_of(R"({"variant":"SemSegNet_z"})"), "variant");
  EXPECT_EQ(path_of(R"({"ablation":{"variants":["DepthNet_b","nope"]}})"), "ablation.variants[1]");
  EXPECT_EQ(path_of(R"({"data":{"toy":{"n_samples":4}}})"), "data.split");
  EXPECT_EQ(path_of(R"({"model":{"fuse":{"knn_k":0}}})"), "model.fuse");
  EXPECT_EQ(path_of(R"({"optim":{"schedule":"cosine"}})"), "optim.schedule");
}

TEST(Config, MaterializedCopyRoundTrips) {
  const RunConfig c = parse_run_config(nlohmann::json::parse(
      R"({"seed":7,"model":{"preset":"full","joint":{"hidden_layers":2}},"loss":{"ignore_id":3},"optim":{"schedule":"poly"},
          "data":{"num_classes":6,"toy":{"n_samples":20}},"ablation":{"variants":["DepthNet_b"]}})"));
  const auto j = to_json(c);
  const RunConfig back = parse_run_config(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(config_digest(back), config_digest(c));
  EXPECT_EQ(back.model.backbone.fpn_channels, 256);
  EXPECT_EQ(back.model.num_classes, 6);
  EXPECT_EQ(back.loss.ignore_id, 3);
  EXPECT_EQ(back.optim.schedule, LrSchedule::poly);
  // Every section is present even though the input omitted most of them.
  for (const char* key : {"data", "model", "optim", "loss", "train", "ablation"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(j["model"]["fuse"].contains("kernel_mlp_widths"));
}

TEST(Config, DigestIgnoresOutputDirectoryOnly) {
  RunConfig a = parse_run_config(nlohmann::json::object());
  RunConfig b = a;
  b.out_dir = "elsewhere";
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.seed = 1;
  EXPECT_NE(config_digest(a), config_digest(b));
}

TEST(Config, DataRootFallsBackToEnvironment) {
  const fs::path root = scratch("envroot");
  cli::generate_data({6, 2, root, 4, 32, 32});
  RunConfig c = parse_run_config(nlohmann::json::parse(R"({"data":{"source":"directory"}})"));
  ::unsetenv(kDataRootEnv);
  EXPECT_THROW(load_data(c), ConfigError);
  ::setenv(kDataRootEnv, root.c_str(), 1);
  const LoadedData d = load_data(c);
  ::unsetenv(kDataRootEnv);
  EXPECT_EQ(d.train.size() + d.val.size() + d.test.size(), 6u);
  EXPECT_EQ(d.unknown_color_pixels, 0u);
}

TEST(Config, DirectoryDataMatchesToyData) {
  // Reading back what generate-data wrote gives the in-memory toy samples.
  const fs::path root = scratch("readback");
  cli::generate_data({5, 3, root, 4, 40, 48});
  RunConfig c = parse_run_config(nlohmann::json::parse(R"({"data":{"source":"directory"}})"));
  c.data.root = root.string();
  const LoadedData d = load_data(c);
  std::vector<data::ImageSample> all = d.train;
  all.insert(all.end(), d.val.begin(), d.val.end());
  all.insert(all.end(), d.test.begin(), d.test.end());
  ASSERT_EQ(all.size(), 5u);
  for (const auto& s : all) {
    const auto ref = data::make_toy_sample(std::stoul(s.sample_id), 3, 4, 40, 48, {});
    EXPECT_EQ(s.semantic_gt.labels, ref.semantic_gt.labels);
    EXPECT_TRUE(std::ranges::equal(s.dense_depth_gt.values(), ref.dense_depth_gt.values()));
    EXPECT_TRUE(std::ranges::equal(s.sparse_depth.values(), ref.sparse_depth.values()));
  }
}

TEST(Config, CropApplies) {
  RunConfig c = parse_run_config(nlohmann::json::parse(
      R"({"data":{"toy":{"n_samples":3,"height":48,"width":64},"split":{"train":1,"val":1,"test":1},
                   "crop":{"height":32,"width":40,"row":4,"col":8}}})"));
  validate(c);
  const LoadedData d = load_data(c);
  EXPECT_EQ(d.train.at(0).height(), 32);
  EXPECT_EQ(d.train.at(0).width(), 40);
}

TEST(GenerateData, ByteIdenticalReruns) {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  ASSERT_EQ(run_cli({"generate-data", "--n", "20", "--seed", "1", "--out", a.string()}).code, 0);
  ASSERT_EQ(run_cli({"generate-data", "--n", "20", "--seed", "1", "--out", b.string()}).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 2u + 20u * 4u);  // meta, split, four PNGs per sample
}

TEST(GenerateData, SparseMapsHoldAtMost8000Points) {
  const fs::path root = scratch("gen_sparse");
  cli::generate_data({3, 5, root, 4, 120, 160});
  const auto meta = data::read_meta(root);
  for (const char* id : {"000000", "000001", "000002"}) {
    const auto s = data::read_sample(root, id, meta).sample;
    std::size_t nonzero = 0, eligible = 0;
    for (std::size_t i = 0; i < s.sparse_depth.size(); ++i) {
      nonzero += s.sparse_depth[i] > 0.0;
      eligible += s.dense_depth_gt[i] > 0.0 && s.dense_depth_gt[i] <= data::kDefaultMaxRangeMm;
    }
    EXPECT_LE(nonzero, 8000u);
    EXPECT_EQ(nonzero, std::min<std::size_t>(8000, eligible));
  }
}

TEST(GenerateData, ZeroSamplesGiveEmptySplit) {
  const fs::path root = scratch("gen_empty");
  ASSERT_EQ(run_cli({"generate-data", "--n", "0", "--out", root.string()}).code, 0);
  const auto split = data::read_split_file(root / "split.txt");
  EXPECT_TRUE(split.train.empty() && split.val.empty() && split.test.empty());
  EXPECT_EQ(data::read_meta(root).num_classes, 4);
}

TEST(Cli, MalformedKeyIsConfigError) {
  const fs::path dir = scratch("lrr");
  write_file(dir / "cfg.json", R"({"optim":{"lrr":0.1}})");
  const auto r = run_cli({"train", "--config", (dir / "cfg.json").string()});
  EXPECT_EQ(r.code, cli::kConfigError);
  const auto rec = last_error(r);
  EXPECT_EQ(rec["error"], "ConfigError");
  EXPECT_EQ(rec["key_path"], "optim.lrr");
}

TEST(Cli, MalformedJsonIsConfigError) {
  const fs::path dir = scratch("badjson");
  write_file(dir / "cfg.json", "{\"optim\": ");
  EXPECT_EQ(run_cli({"train", "--config", (dir / "cfg.json").string()}).code, cli::kConfigError);
}

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run_cli({}).code, cli::kConfigError);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kConfigError);
  EXPECT_EQ(run_cli({"generate-data", "--n", "lots"}).code, cli::kConfigError);
  EXPECT_EQ(run_cli({"train", "--variant", "NoSuchNet"}).code, cli::kConfigError);
}

TEST(Cli, GroundTruthStubScoresPerfectly) {
  const fs::path dir = scratch("gtstub");
  ASSERT_EQ(run_cli({"generate-data", "--n", "20", "--seed", "4", "--out", (dir / "data").string()}).code, 0);
  write_file(dir / "cfg.json", small_config(dir / "data", dir / "run").dump());
  const auto r = run_cli({"evaluate", "--config", (dir / "cfg.json").string(), "--variant", "gt-stub"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = metrics_from_json(nlohmann::json::parse(slurp(dir / "run" / "evaluation.json")));
  EXPECT_EQ(rep.variant, "gt-stub");
  EXPECT_EQ(rep.miou, 1.0);
  EXPECT_EQ(rep.rmse_mm, 0.0);
  EXPECT_GT(rep.n_samples, 0);
  EXPECT_NE(r.out.find("| gt-stub | 1.0000 | 0.0 |"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "run" / "config.json"));
}

TEST(Cli, MissingCheckpointIsRuntimeError) {
  const fs::path dir = scratch("nockpt");
  cli::generate_data({8, 0, dir / "data", 4, 64, 64});
  write_file(dir / "cfg.json", small_config(dir / "data", dir / "run").dump());
  const auto r = run_cli({"evaluate", "--config", (dir / "cfg.json").string()});
  EXPECT_EQ(r.code, cli::kRuntimeError);
  EXPECT_EQ(last_error(r)["error"], "MissingCheckpoint");
}

TEST(Cli, DivergenceExitsWithThree) {
  const fs::path dir = scratch("diverge");
  cli::generate_data({8, 0, dir / "data", 4, 64, 64});
  auto cfg = small_config(dir / "data", dir / "run", 50);
  cfg["optim"]["lr"] = 1e3;
  cfg["variant"] = "DepthNet_b";
  write_file(dir / "cfg.json", cfg.dump());
  const auto r = run_cli({"train", "--config", (dir / "cfg.json").string()});
  EXPECT_EQ(r.code, cli::kDivergence);
  const auto rec = last_error(r);
  EXPECT_EQ(rec["error"], "Divergence");
  EXPECT_GE(rec["step"].get<long>(), 1);
}

TEST(Cli, TrainWritesRunDirectoryAndReplaysExactly) {
  const fs::path dir = scratch("replay");
  cli::generate_data({12, 9, dir / "data", 4, 64, 64});
  write_file(dir / "cfg.json", small_config(dir / "data", dir / "run_a").dump());
  ASSERT_EQ(run_cli({"train", "--config", (dir / "cfg.json").string()}).code, 0);
  // Replay from the frozen copy, into a second directory.
  const auto r = run_cli({"train", "--config", (dir / "run_a" / "config.json").string(), "--out", (dir / "run_b").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"train_log.jsonl", "validation.jsonl", "last.ckpt", "best.ckpt", "report.json", "loss_curves.png"}) {
    ASSERT_TRUE(fs::exists(dir / "run_a" / f)) << f;
    EXPECT_EQ(slurp(dir / "run_a" / f), slurp(dir / "run_b" / f)) << f;
  }
  const auto frozen = parse_run_config(nlohmann::json::parse(slurp(dir / "run_b" / "config.json")));
  EXPECT_EQ(frozen.out_dir, (dir / "run_b").string());
  EXPECT_EQ(report::read_train_log(dir / "run_a" / "train_log.jsonl").size(), 3u);
  // A different seed gives a different run.
  ASSERT_EQ(run_cli({"train", "--config", (dir / "cfg.json").string(), "--seed", "5", "--out", (dir / "run_c").string()}).code, 0);
  EXPECT_NE(slurp(dir / "run_a" / "last.ckpt"), slurp(dir / "run_c" / "last.ckpt"));
}

TEST(Cli, EvaluateLeavesCheckpointAndMatchesTrainReport) {
  const fs::path dir = scratch("evalro");
  cli::generate_data({12, 2, dir / "data", 4, 64, 64});
  write_file(dir / "cfg.json", small_config(dir / "data", dir / "run").dump());
  ASSERT_EQ(run_cli({"train", "--config", (dir / "cfg.json").string()}).code, 0);
  const auto before = slurp(dir / "run" / "best.ckpt");
  const auto r = run_cli({"evaluate", "--config", (dir / "run" / "config.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "run" / "best.ckpt"), before);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "run" / "evaluation.json")),
            nlohmann::json::parse(slurp(dir / "run" / "report.json")));
}

TEST(Cli, AblateShowsReferenceColumn) {
  const fs::path dir = scratch("ablate");
  cli::generate_data({10, 1, dir / "data", 4, 64, 64});
  auto cfg = small_config(dir / "data", dir / "abl", 2);
  cfg["ablation"] = {{"variants", {"DepthNet_b", "SemSegNet_b"}}};
  write_file(dir / "cfg.json", cfg.dump());
  const auto r = run_cli({"ablate", "--config", (dir / "cfg.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string md = slurp(dir / "abl" / "ablation.md");
  EXPECT_NE(md.find("| SemSegNet_b |"), std::string::npos);
  EXPECT_NE(md.find("| 0.520 | - |"), std::string::npos);
  EXPECT_NE(md.find("| - | 580.2 |"), std::string::npos);
  EXPECT_NE(md.find("not expected to match desk-scale runs"), std::string::npos);
  EXPECT_NE(md.find("loss = 1 * semantic"), std::string::npos);
  const auto back = report::ablation_from_json(nlohmann::json::parse(slurp(dir / "abl" / "ablation.json")));
  EXPECT_EQ(render_ablation_table(back), md);
  // Variant flags replace the config list.
  ASSERT_EQ(run_cli({"ablate", "--config", (dir / "cfg.json").string(), "--variant", "DepthNet_b", "--out",
                     (dir / "abl2").string()})
                .code,
            0);
  EXPECT_EQ(report::ablation_from_json(nlohmann::json::parse(slurp(dir / "abl2" / "ablation.json"))).rows.size(), 1u);
}

TEST(Cli, ReportAggregatesRuns) {
  const fs::path dir = scratch("report");
  cli::generate_data({10, 3, dir / "data", 4, 64, 64});
  write_file(dir / "cfg.json", small_config(dir / "data", dir / "run").dump());
  ASSERT_EQ(run_cli({"train", "--config", (dir / "cfg.json").string()}).code, 0);
  ASSERT_EQ(run_cli({"evaluate", "--config", (dir / "cfg.json").string(), "--variant", "gt-stub", "--out",
                     (dir / "stub").string()})
                .code,
            0);
  const auto r = run_cli({"report", (dir / "run").string(), (dir / "stub").string(), "--out", (dir / "rep").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string md = slurp(dir / "rep" / "report.md");
  EXPECT_NE(md.find("| SemSegNet_b |"), std::string::npos);
  EXPECT_NE(md.find("| gt-stub | 1.0000 | 0.0 |"), std::string::npos);
  EXPECT_NE(md.find("Reference mIoU*"), std::string::npos);
  const auto png = data::read_png(dir / "rep" / "run_loss_curves.png");
  EXPECT_EQ(png.channels, 3);
  EXPECT_GT(png.width, 0);
  EXPECT_EQ(run_cli({"report", (dir / "absent").string(), "--out", (dir / "rep2").string()}).code, cli::kRuntimeError);
  EXPECT_FALSE(fs::exists(dir / "rep2"));
}

TEST(Report, MetricsRecordRoundTrips) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    MetricsReport m;
    m.variant = std::string(variant_table()[static_cast<std::size_t>(i % 9)].name);
    if (i % 3) m.miou = rng.uniform();
    if (i % 4) m.rmse_mm = rng.uniform() * 1e5;
    m.n_samples = i;
    m.config_digest = "00ff" + std::to_string(i);
    // Through text, as a reader of report.json would see it.
    EXPECT_EQ(metrics_from_json(nlohmann::json::parse(to_json(m).dump())), m);
  }
}

TEST(Report, TrainLogRoundTrips) {
  const fs::path dir = scratch("logrt");
  std::vector<TrainLogEntry> log{{1, 2.5, std::nullopt, 2.5, 0.1}, {2, std::nullopt, 1e7, 0.1, 0.1}, {3, 0.3, 4e6, 0.34, 0.1}};
  report::write_train_log(dir / "log.jsonl", log);
  EXPECT_EQ(report::read_train_log(dir / "log.jsonl"), log);
}

TEST(Report, LossPlotHasOnePanelPerLoss) {
  const fs::path dir = scratch("plot");
  std::vector<TrainLogEntry> log;
  for (long s = 1; s <= 40; ++s) log.push_back({s, 2.0 / s, 1e6 / s, 2.0 / s + 1e-2 / s, 0.1});
  EXPECT_EQ(report::plot_loss_curves(dir / "a.png", log), (std::vector<std::string>{"joint", "semantic", "depth"}));
  const auto img = data::read_png(dir / "a.png");
  EXPECT_EQ(img.height, 3 * 180);
  log = {{1, std::nullopt, 5.0, 5.0, 0.1}};
  EXPECT_EQ(report::plot_loss_curves(dir / "b.png", log), (std::vector<std::string>{"joint", "depth"}));
}

TEST(Config, ShippedConfigsAreValid) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(fs::path(SEMSEGDEPTH_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".json") continue;
    ++n;
    RunConfig c;
    ASSERT_NO_THROW(c = load_run_config(e.path())) << e.path();
    EXPECT_NO_THROW(validate(c)) << e.path();
  }
  EXPECT_GE(n, 3u);
}
