#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "semsegdepth/core/rng.hpp"
#include "semsegdepth/core/errors.hpp"

namespace semsegdepth::data {

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  bool operator==(const DatasetSplit&) const = default;
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// Seeded shuffle, then consecutive slices of the requested sizes.
inline DatasetSplit split_dataset(std::vector<std::string> ids, SplitCounts counts, std::uint64_t seed) {
  const std::size_t need = counts.train + counts.val + counts.test;
  if (need > ids.size()) {
    throw InsufficientSamples("split needs " + std::to_string(need) + " samples, have " + std::to_string(ids.size()));
  }
  Rng rng(mix_seed(seed, "dataset-split"));
  rng.shuffle(ids);
  DatasetSplit out;
  auto it = ids.begin();
  out.train.assign(it, it + static_cast<long>(counts.train));
  it += static_cast<long>(counts.train);
  out.val.assign(it, it + static_cast<long>(counts.val));
  it += static_cast<long>(counts.val);
  out.test.assign(it, it + static_cast<long>(counts.test));
  return out;
}

/// Counts in the 500 : 125 : 200 proportion of the reference protocol; the
/// remainder goes to test so the counts sum to n.
inline SplitCounts proportional_counts(std::size_t n) {
  SplitCounts c;
  c.train = n * 500 / 825;
  c.val = n * 125 / 825;
  c.test = n - c.train - c.val;
  return c;
}

/// Plain-text split file: "[train]", "[val]", "[test]" section headers, one id per line.
inline void write_split_file(const std::filesystem::path& path, const DatasetSplit& split) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write split file " + path.string());
  const std::array<std::pair<const char*, const std::vector<std::string>*>, 3> sections = {
      {{"train", &split.train}, {"val", &split.val}, {"test", &split.test}}};
  for (const auto& [name, ids] : sections) {
    os << '[' << name << "]\n";
    for (const auto& id : *ids) os << id << '\n';
  }
}

inline DatasetSplit read_split_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingFile("missing split file " + path.string());
  DatasetSplit split;
  std::vector<std::string>* current = nullptr;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line == "[train]") current = &split.train;
    else if (line == "[val]") current = &split.val;
    else if (line == "[test]") current = &split.test;
    else if (!current) throw IoError("split file entry before any section: " + line);
    else current->push_back(line);
  }
  return split;
}

}  // namespace semsegdepth::data
