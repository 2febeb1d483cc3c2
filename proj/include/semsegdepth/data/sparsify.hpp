#pragma once

#include <cstdint>
#include <vector>

#include "semsegdepth/core/rng.hpp"
#include "semsegdepth/data/image_sample.hpp"

namespace semsegdepth::data {

struct SparsifyConfig {
  double max_range_mm = kDefaultMaxRangeMm;
  int n_points = 8000;
  std::uint64_t seed = 0;
};

/// Simulated LiDAR: keep min(n_points, eligible) pixels drawn uniformly without
/// replacement among pixels with 0 < depth <= max_range_mm; zero elsewhere.
inline Tensor sparsify_depth(const Tensor& dense, const SparsifyConfig& cfg) {
  if (cfg.n_points < 1) throw ShapeError("sparsify_depth: n_points must be >= 1");
  if (!(cfg.max_range_mm > 0.0)) throw ShapeError("sparsify_depth: max_range_mm must be > 0");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dense.size(); ++i) {
    const double v = dense[i];
    if (v > 0.0 && v <= cfg.max_range_mm) eligible.push_back(i);
  }
  if (eligible.empty()) throw NoEligiblePoints("no depth pixel within (0, " + std::to_string(cfg.max_range_mm) + "] mm");
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(cfg.n_points), eligible.size());
  Rng rng(cfg.seed);
  // partial Fisher-Yates: the first `keep` slots become the sample
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  Tensor out(dense.shape());
  for (std::size_t i = 0; i < keep; ++i) out[eligible[i]] = dense[eligible[i]];
  return out;
}

/// Per-sample sparsification seed, stable across runs.
inline std::uint64_t sparsify_seed(std::uint64_t base_seed, const std::string& sample_id, long epoch = -1) {
  std::uint64_t s = mix_seed(base_seed, sample_id);
  return epoch < 0 ? s : mix_seed(s, static_cast<std::uint64_t>(epoch));
}

}  // namespace semsegdepth::data
