#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "semsegdepth/core/autograd.hpp"
#include "semsegdepth/core/rng.hpp"

namespace semsegdepth::nn {

enum class Init {
  zeros,
  ones,
  he_normal,    // N(0, 2 / fan_in), for layers followed by ReLU
  lecun_normal,  // N(0, 1 / fan_in)
  // he_normal with each output filter shifted to zero mean, so filters fed by
  // nonnegative (post-ReLU) inputs do not start with a systematic offset
  he_centered
};

/// Trainable parameters keyed by dotted module path ("backbone.stem.conv.weight").
///
/// Initial values depend only on (seed, key), so every variant that declares
/// the same key starts from the same weights regardless of construction order.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  Var create(const std::string& key, Shape shape, Init init, int fan_in = 1) {
    if (params_.count(key)) throw ShapeError("duplicate parameter key " + key);
    Tensor t(std::move(shape));
    Rng rng(mix_seed(seed_, key));
    switch (init) {
      case Init::zeros:
        break;
      case Init::ones:
        t.fill(1.0);
        break;
      case Init::he_normal:
      case Init::he_centered:
      case Init::lecun_normal: {
        const double gain = init == Init::lecun_normal ? 1.0 : 2.0;
        const double sd = std::sqrt(gain / std::max(1, fan_in));
        for (double& v : t.values()) v = sd * rng.normal();
        const std::size_t row = t.ndim() > 1 ? t.size() / static_cast<std::size_t>(t.dim(0)) : 0;
        if (init == Init::he_centered && row > 1) {
          const double rescale = std::sqrt(static_cast<double>(row) / static_cast<double>(row - 1));
          for (std::size_t r = 0; r < t.size(); r += row) {
            double mean = 0.0;
            for (std::size_t i = 0; i < row; ++i) mean += t[r + i];
            mean /= static_cast<double>(row);
            for (std::size_t i = 0; i < row; ++i) t[r + i] = (t[r + i] - mean) * rescale;
          }
        }
        break;
      }
    }
    Var p = Var::leaf(std::move(t), true);
    params_.emplace(key, p);
    return p;
  }

  /// Stride of the convolution owning weight `key` (1 when not recorded).
  void set_conv_stride(const std::string& key, int stride) { conv_strides_[key] = stride; }
  int conv_stride(const std::string& key) const {
    auto it = conv_strides_.find(key);
    return it == conv_strides_.end() ? 1 : it->second;
  }

  bool contains(const std::string& key) const { return params_.count(key) != 0; }
  const Var& get(const std::string& key) const {
    auto it = params_.find(key);
    if (it == params_.end()) throw ShapeError("unknown parameter key " + key);
    return it->second;
  }
  Var& get(const std::string& key) {
    auto it = params_.find(key);
    if (it == params_.end()) throw ShapeError("unknown parameter key " + key);
    return it->second;
  }

  const std::map<std::string, Var>& params() const { return params_; }
  std::map<std::string, Var>& params() { return params_; }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) {
      v.node()->ensure_grad();
      v.zero_grad();
    }
  }

  /// FNV-1a over keys, shapes and raw parameter bytes.
  std::uint64_t digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [k, v] : params_) {
      h = fnv1a64(k, h);
      for (int d : v.shape()) h = fnv1a64_bytes(&d, sizeof d, h);
      h = fnv1a64_bytes(v.value().data(), v.value().size() * sizeof(double), h);
    }
    return h;
  }

  /// Binary checkpoint, little-endian:
  ///   "SSDCKPT1" | u32 count | { u32 key_len | key | u32 ndim | i32 dims[ndim] | f64 values[] }*
  /// Entries are sorted by key.
  void save(const std::filesystem::path& path) const {
    static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    os.write(kMagic, 8);
    write_u32(os, static_cast<std::uint32_t>(params_.size()));
    for (const auto& [k, v] : params_) {
      write_u32(os, static_cast<std::uint32_t>(k.size()));
      os.write(k.data(), static_cast<std::streamsize>(k.size()));
      write_u32(os, static_cast<std::uint32_t>(v.shape().size()));
      for (int d : v.shape()) os.write(reinterpret_cast<const char*>(&d), sizeof d);
      os.write(reinterpret_cast<const char*>(v.value().data()),
               static_cast<std::streamsize>(v.value().size() * sizeof(double)));
    }
    if (!os) throw IoError("failed writing checkpoint " + path.string());
  }

  /// Reads a checkpoint into the existing parameters. The key set and every
  /// shape must match exactly.
  void load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingCheckpoint("cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw IoError("not a checkpoint: " + path.string());
    const std::uint32_t count = read_u32(is);
    std::map<std::string, Tensor> loaded;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string key(read_u32(is), '\0');
      is.read(key.data(), static_cast<std::streamsize>(key.size()));
      Shape shape(read_u32(is));
      for (int& d : shape) is.read(reinterpret_cast<char*>(&d), sizeof d);
      Tensor t(shape);
      is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
      if (!is) throw IoError("truncated checkpoint " + path.string());
      loaded.emplace(std::move(key), std::move(t));
    }
    if (loaded.size() != params_.size()) {
      throw ShapeMismatch("checkpoint has " + std::to_string(loaded.size()) + " tensors, model has " +
                          std::to_string(params_.size()));
    }
    for (auto& [k, v] : params_) {
      auto it = loaded.find(k);
      if (it == loaded.end()) throw ShapeMismatch("checkpoint lacks parameter " + k);
      if (it->second.shape() != v.shape()) throw ShapeMismatch("checkpoint shape mismatch for " + k);
      v.mutable_value() = std::move(it->second);
    }
  }

  void copy_values_from(const ParamStore& other) {
    for (auto& [k, v] : params_) v.mutable_value() = other.get(k).value();
  }

  std::map<std::string, Tensor> snapshot() const {
    std::map<std::string, Tensor> out;
    for (const auto& [k, v] : params_) out.emplace(k, v.value());
    return out;
  }
  void restore(const std::map<std::string, Tensor>& values) {
    for (auto& [k, v] : params_) {
      auto it = values.find(k);
      if (it == values.end() || it->second.shape() != v.shape()) throw ShapeMismatch("snapshot mismatch for " + k);
      v.mutable_value() = it->second;
    }
  }

 private:
  static constexpr char kMagic[8] = {'S', 'S', 'D', 'C', 'K', 'P', 'T', '1'};

  static void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
  static std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw IoError("truncated checkpoint");
    return v;
  }

  std::uint64_t seed_;
  std::map<std::string, Var> params_;
  std::map<std::string, int> conv_strides_;
};

/// A ParamStore plus a key prefix; passed to layer constructors.
class Scope {
 public:
  Scope(ParamStore& store, std::string prefix) : store_(&store), prefix_(std::move(prefix)) {}

  Scope operator/(const std::string& name) const { return Scope(*store_, key(name)); }
  std::string key(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }
  Var param(const std::string& name, Shape shape, Init init, int fan_in = 1) const {
    return store_->create(key(name), std::move(shape), init, fan_in);
  }
  const std::string& prefix() const { return prefix_; }
  ParamStore& store() const { return *store_; }

 private:
  ParamStore* store_;
  std::string prefix_;
};

}  // namespace semsegdepth::nn
