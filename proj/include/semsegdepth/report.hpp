#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "semsegdepth/data/png_io.hpp"
#include "semsegdepth/harness.hpp"

namespace semsegdepth::report {

namespace fs = std::filesystem;

inline TrainLogEntry train_log_entry_from_json(const nlohmann::json& j) {
  TrainLogEntry e;
  e.step = j.at("step").get<long>();
  e.joint_loss = j.at("joint_loss").get<double>();
  e.lr = j.at("lr").get<double>();
  if (!j.at("semantic_loss").is_null()) e.semantic_loss = j.at("semantic_loss").get<double>();
  if (!j.at("depth_loss").is_null()) e.depth_loss = j.at("depth_loss").get<double>();
  return e;
}

inline void write_train_log(const fs::path& path, const std::vector<TrainLogEntry>& log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& e : log) os << to_json(e).dump() << '\n';
}

inline std::vector<TrainLogEntry> read_train_log(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingFile("missing file " + path.string());
  std::vector<TrainLogEntry> log;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) log.push_back(train_log_entry_from_json(nlohmann::json::parse(line)));
  return log;
}

inline nlohmann::json to_json(const AblationResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j{{"variant", row.variant}};
    j["report"] = row.report ? semsegdepth::to_json(*row.report) : nlohmann::json(nullptr);
    j["error"] = row.error ? nlohmann::json(*row.error) : nlohmann::json(nullptr);
    j["final_step"] = row.final_step ? semsegdepth::to_json(*row.final_step) : nlohmann::json(nullptr);
    rows.push_back(std::move(j));
  }
  return {{"rows", rows},
          {"optim",
           {{"lr", r.optim.lr},
            {"momentum", r.optim.momentum},
            {"weight_decay", r.optim.weight_decay},
            {"steps", r.optim.steps},
            {"batch_size", r.optim.batch_size},
            {"schedule", to_string(r.optim.schedule)},
            {"poly_power", r.optim.poly_power}}},
          {"loss",
           {{"semantic_weight", r.loss.semantic_weight},
            {"depth_weight", r.loss.depth_weight},
            {"depth_target", to_string(r.loss.depth_target)},
            {"ignore_id", r.loss.ignore_id ? nlohmann::json(*r.loss.ignore_id) : nlohmann::json(nullptr)}}},
          {"n_train", r.n_train},
          {"n_val", r.n_val},
          {"n_eval", r.n_eval},
          {"seed", r.seed}};
}

inline AblationResult ablation_from_json(const nlohmann::json& j) {
  AblationResult r;
  for (const auto& jr : j.at("rows")) {
    AblationRow row;
    row.variant = jr.at("variant").get<std::string>();
    if (!jr.at("report").is_null()) row.report = metrics_from_json(jr.at("report"));
    if (!jr.at("error").is_null()) row.error = jr.at("error").get<std::string>();
    if (!jr.at("final_step").is_null()) row.final_step = train_log_entry_from_json(jr.at("final_step"));
    r.rows.push_back(std::move(row));
  }
  const auto& o = j.at("optim");
  r.optim.lr = o.at("lr").get<double>();
  r.optim.momentum = o.at("momentum").get<double>();
  r.optim.weight_decay = o.at("weight_decay").get<double>();
  r.optim.steps = o.at("steps").get<long>();
  r.optim.batch_size = o.at("batch_size").get<int>();
  r.optim.schedule = o.at("schedule").get<std::string>() == "poly" ? LrSchedule::poly : LrSchedule::constant;
  r.optim.poly_power = o.at("poly_power").get<double>();
  const auto& l = j.at("loss");
  r.loss.semantic_weight = l.at("semantic_weight").get<double>();
  r.loss.depth_weight = l.at("depth_weight").get<double>();
  r.loss.depth_target = l.at("depth_target").get<std::string>() == "dense" ? DepthTarget::dense : DepthTarget::sparse;
  if (!l.at("ignore_id").is_null()) r.loss.ignore_id = l.at("ignore_id").get<int>();
  r.n_train = j.at("n_train").get<std::size_t>();
  r.n_val = j.at("n_val").get<std::size_t>();
  r.n_eval = j.at("n_eval").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

/// One row per run, measured values next to the published ones.
struct RunSummary {
  std::string run_dir;
  MetricsReport metrics;
  std::optional<TrainLogEntry> final_step;
};

inline std::string render_comparison_table(const std::vector<RunSummary>& runs) {
  std::ostringstream os;
  os << "| Run | Variant | mIoU | RMSE (mm) | Final joint loss | Reference mIoU* | Reference RMSE (mm)* |\n";
  os << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : runs) {
    const ReferenceRow* ref = find_reference(r.metrics.variant);
    std::optional<double> last;
    if (r.final_step) last = r.final_step->joint_loss;
    os << "| " << r.run_dir << " | " << r.metrics.variant << " | " << format_metric(r.metrics.miou, 4) << " | "
       << format_metric(r.metrics.rmse_mm, 1) << " | " << format_metric(last, 4) << " | " << (ref ? ref->miou : "-")
       << " | " << (ref ? ref->rmse_mm : "-") << " |\n";
  }
  os << "\n* " << kReferenceFootnote << "\n";
  return os.str();
}

/// Minimal RGB raster for line plots.
class Canvas {
 public:
  using Color = std::array<std::uint16_t, 3>;

  Canvas(int width, int height, Color background = {255, 255, 255})
      : w_(width), h_(height), px_(static_cast<std::size_t>(width) * height * 3) {
    for (std::size_t i = 0; i < px_.size(); i += 3) std::copy(background.begin(), background.end(), px_.begin() + i);
  }

  void set(int x, int y, Color c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    const std::size_t i = (static_cast<std::size_t>(y) * w_ + x) * 3;
    std::copy(c.begin(), c.end(), px_.begin() + i);
  }

  void line(int x0, int y0, int x1, int y1, Color c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) err += dy, x0 += sx;
      if (e2 <= dx) err += dx, y0 += sy;
    }
  }

  void rect(int x0, int y0, int x1, int y1, Color c) {
    line(x0, y0, x1, y0, c);
    line(x1, y0, x1, y1, c);
    line(x1, y1, x0, y1, c);
    line(x0, y1, x0, y0, c);
  }

  void save(const fs::path& path) const { write_png(path, data::PngImage{w_, h_, 3, 8, px_}); }

 private:
  int w_, h_;
  std::vector<std::uint16_t> px_;
};

struct Series {
  std::string name;
  Canvas::Color color;
  std::vector<std::pair<double, double>> points;  // (step, loss)
};

inline std::vector<Series> loss_series(const std::vector<TrainLogEntry>& log) {
  Series sem{"semantic", {31, 119, 180}, {}}, dep{"depth", {255, 127, 14}, {}}, joint{"joint", {0, 0, 0}, {}};
  for (const auto& e : log) {
    const auto s = static_cast<double>(e.step);
    if (e.semantic_loss) sem.points.emplace_back(s, *e.semantic_loss);
    if (e.depth_loss) dep.points.emplace_back(s, *e.depth_loss);
    joint.points.emplace_back(s, e.joint_loss);
  }
  std::vector<Series> out;
  for (auto* s : {&joint, &sem, &dep})
    if (!s->points.empty()) out.push_back(std::move(*s));
  return out;
}

/// Stacked panels, one per loss, each on its own log10 axis with grey lines
/// at every decade. Top to bottom: joint (black), semantic (blue), depth
/// (orange). Returns the panel order.
inline std::vector<std::string> plot_loss_curves(const fs::path& path, const std::vector<TrainLogEntry>& log) {
  constexpr int kWidth = 640, kPanel = 180, kMargin = 12;
  const auto series = loss_series(log);
  const int panels = std::max<int>(1, static_cast<int>(series.size()));
  Canvas canvas(kWidth, panels * kPanel);
  std::vector<std::string> order;
  for (std::size_t p = 0; p < series.size(); ++p) {
    const auto& s = series[p];
    order.push_back(s.name);
    const int top = static_cast<int>(p) * kPanel + kMargin, bottom = (static_cast<int>(p) + 1) * kPanel - kMargin;
    const int left = kMargin, right = kWidth - kMargin;
    double xmin = s.points.front().first, xmax = s.points.back().first;
    double ymin = INFINITY, ymax = -INFINITY;
    for (const auto& [x, y] : s.points) {
      if (!(y > 0.0) || !std::isfinite(y)) continue;
      ymin = std::min(ymin, std::log10(y));
      ymax = std::max(ymax, std::log10(y));
    }
    if (!std::isfinite(ymin)) ymin = ymax = 0.0;
    ymin = std::floor(ymin);
    ymax = std::max(std::ceil(ymax), ymin + 1.0);
    if (xmax <= xmin) xmax = xmin + 1.0;
    auto px = [&](double x) { return left + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (right - left))); };
    auto py = [&](double ly) { return bottom - static_cast<int>(std::lround((ly - ymin) / (ymax - ymin) * (bottom - top))); };
    for (double d = ymin; d <= ymax; d += 1.0) canvas.line(left, py(d), right, py(d), {210, 210, 210});
    canvas.rect(left, top, right, bottom, {120, 120, 120});
    std::optional<std::pair<int, int>> prev;
    for (const auto& [x, y] : s.points) {
      if (!(y > 0.0) || !std::isfinite(y)) {
        prev.reset();
        continue;
      }
      const std::pair<int, int> cur{px(x), py(std::log10(y))};
      if (prev) canvas.line(prev->first, prev->second, cur.first, cur.second, s.color);
      else canvas.set(cur.first, cur.second, s.color);
      prev = cur;
    }
  }
  canvas.save(path);
  return order;
}

}  // namespace semsegdepth::report
