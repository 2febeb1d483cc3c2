#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "semsegdepth/core/ops.hpp"
#include "semsegdepth/data/image_sample.hpp"

namespace semsegdepth {

inline std::vector<double> log_softmax(std::span<const double> x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

namespace detail {
inline void check_label(int label, int nc, const std::optional<int>& ignore_id) {
  if (ignore_id && label == *ignore_id) return;
  if (label < 0 || label >= nc)
    throw InvalidClassId("class id " + std::to_string(label) + " outside [0, " + std::to_string(nc) + ")");
}
}  // namespace detail

/// Mean cross-entropy over non-ignored pixels of nc x H x W logits. Returns
/// zero when every pixel is ignored.
inline nn::Var semantic_loss(const nn::Var& logits, const data::LabelMap& gt, std::optional<int> ignore_id = {}) {
  const int nc = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  if (gt.height != h || gt.width != w)
    throw ShapeMismatch("semantic_loss: logits " + shape_str(logits.shape()) + " vs labels " +
                        std::to_string(gt.height) + "x" + std::to_string(gt.width));
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int label : gt.labels) detail::check_label(label, nc, ignore_id);

  const Tensor prob = nn::softmax_channels_value(logits.value());
  std::size_t counted = 0;
  double total = 0.0;
  std::vector<double> column(static_cast<std::size_t>(nc));
  for (std::size_t p = 0; p < hw; ++p) {
    const int label = gt.labels[p];
    if (ignore_id && label == *ignore_id) continue;
    for (int c = 0; c < nc; ++c) column[c] = logits.value()[c * hw + p];
    total -= log_softmax(column)[label];
    ++counted;
  }
  const double inv_n = counted ? 1.0 / static_cast<double>(counted) : 0.0;
  return nn::make_result(Tensor({1}, total * inv_n), {logits}, [prob, labels = gt.labels, ignore_id, nc, hw, inv_n](nn::Node& self) {
    Tensor* g = nn::input_grad(self, 0);
    if (!g) return;
    const double up = self.grad[0] * inv_n;
    for (std::size_t p = 0; p < hw; ++p) {
      const int label = labels[p];
      if (ignore_id && label == *ignore_id) continue;
      for (int c = 0; c < nc; ++c) (*g)[c * hw + p] += up * (prob[c * hw + p] - (c == label ? 1.0 : 0.0));
    }
  });
}

/// Pixels with a positive ground-truth depth.
inline std::vector<std::uint8_t> valid_depth_mask(const Tensor& gt_mm) {
  std::vector<std::uint8_t> mask(gt_mm.size());
  for (std::size_t i = 0; i < gt_mm.size(); ++i) mask[i] = gt_mm[i] > 0.0;
  return mask;
}

/// Mean squared error (mm^2) over masked pixels. pred: 1 x H x W or H x W.
inline nn::Var depth_loss(const nn::Var& pred, const Tensor& gt_mm, const std::vector<std::uint8_t>& mask) {
  if (pred.value().size() != gt_mm.size() || mask.size() != gt_mm.size())
    throw ShapeMismatch("depth_loss: prediction " + shape_str(pred.shape()) + " vs ground truth " +
                        shape_str(gt_mm.shape()));
  std::size_t n = 0;
  double sse = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const double e = pred.value()[i] - gt_mm[i];
    sse += e * e;
    ++n;
  }
  if (n == 0) throw EmptyMask("depth_loss: no valid ground-truth pixels");
  const double inv_n = 1.0 / static_cast<double>(n);
  return nn::make_result(Tensor({1}, sse * inv_n), {pred}, [pred, gt_mm, mask, inv_n](nn::Node& self) {
    Tensor* g = nn::input_grad(self, 0);
    if (!g) return;
    const double up = 2.0 * self.grad[0] * inv_n;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) (*g)[i] += up * (pred.value()[i] - gt_mm[i]);
  });
}

inline nn::Var depth_loss(const nn::Var& pred, const Tensor& gt_mm) {
  return depth_loss(pred, gt_mm, valid_depth_mask(gt_mm));
}

inline double joint_loss(double semantic, double depth) { return semantic + depth; }
inline nn::Var joint_loss(const nn::Var& semantic, const nn::Var& depth) { return nn::add(semantic, depth); }

struct LossValue {
  std::optional<double> semantic;
  std::optional<double> depth;

  double joint() const { return semantic.value_or(0.0) + depth.value_or(0.0); }
};

// ---------------------------------------------------------------------------
// metrics

/// Per-pixel argmax over channels; ties resolve to the lowest class.
inline data::LabelMap argmax_labels(const Tensor& logits) {
  const int nc = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  data::LabelMap out(h, w);
  for (std::size_t p = 0; p < hw; ++p) {
    int best = 0;
    for (int c = 1; c < nc; ++c)
      if (logits[c * hw + p] > logits[best * hw + p]) best = c;
    out.labels[p] = best;
  }
  return out;
}

/// Per-class true/false positives and false negatives, accumulated over any
/// number of images.
class ConfusionCounts {
 public:
  explicit ConfusionCounts(int num_classes)
      : nc_(num_classes), tp_(num_classes, 0), fp_(num_classes, 0), fn_(num_classes, 0) {}

  void add(const data::LabelMap& pred, const data::LabelMap& gt, std::optional<int> ignore_id = {}) {
    if (pred.height != gt.height || pred.width != gt.width) throw ShapeMismatch("confusion: label map extents differ");
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      const int g = gt.labels[i], p = pred.labels[i];
      if (ignore_id && g == *ignore_id) continue;
      detail::check_label(g, nc_, std::nullopt);
      detail::check_label(p, nc_, std::nullopt);
      ++labelled_;
      if (p == g) {
        ++tp_[g];
      } else {
        ++fp_[p];
        ++fn_[g];
      }
    }
  }

  int num_classes() const { return nc_; }
  std::int64_t tp(int c) const { return tp_[c]; }
  std::int64_t fp(int c) const { return fp_[c]; }
  std::int64_t fn(int c) const { return fn_[c]; }
  std::int64_t labelled_pixels() const { return labelled_; }

  /// IoU of class c; empty when the class is absent from both prediction and truth.
  std::optional<double> iou(int c) const {
    const std::int64_t uni = tp_[c] + fp_[c] + fn_[c];
    if (uni == 0) return std::nullopt;
    return static_cast<double>(tp_[c]) / static_cast<double>(uni);
  }

  /// Mean IoU over classes with a nonzero union.
  double miou() const {
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < nc_; ++c) {
      if (auto v = iou(c)) {
        sum += *v;
        ++present;
      }
    }
    if (present == 0) throw EmptyMask("miou: no labelled pixels");
    return sum / present;
  }

 private:
  int nc_;
  std::vector<std::int64_t> tp_, fp_, fn_;
  std::int64_t labelled_ = 0;
};

inline double miou(const data::LabelMap& pred, const data::LabelMap& gt, int nc, std::optional<int> ignore_id = {}) {
  ConfusionCounts counts(nc);
  counts.add(pred, gt, ignore_id);
  return counts.miou();
}

/// Running squared-error sum for pooled RMSE.
struct DepthErrorSum {
  double sse = 0.0;
  std::size_t count = 0;

  void add(const Tensor& pred_mm, const Tensor& gt_mm, const std::vector<std::uint8_t>& mask) {
    if (pred_mm.size() != gt_mm.size() || mask.size() != gt_mm.size()) throw ShapeMismatch("rmse: extents differ");
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      const double e = pred_mm[i] - gt_mm[i];
      sse += e * e;
      ++count;
    }
  }
  void add(const Tensor& pred_mm, const Tensor& gt_mm) { add(pred_mm, gt_mm, valid_depth_mask(gt_mm)); }

  double mean_squared() const {
    if (count == 0) throw EmptyMask("rmse: no valid ground-truth pixels");
    return sse / static_cast<double>(count);
  }
  double rmse() const { return std::sqrt(mean_squared()); }
};

inline double rmse(const Tensor& pred_mm, const Tensor& gt_mm, const std::vector<std::uint8_t>& mask) {
  DepthErrorSum e;
  e.add(pred_mm, gt_mm, mask);
  return e.rmse();
}

inline double rmse(const Tensor& pred_mm, const Tensor& gt_mm) { return rmse(pred_mm, gt_mm, valid_depth_mask(gt_mm)); }

}  // namespace semsegdepth
