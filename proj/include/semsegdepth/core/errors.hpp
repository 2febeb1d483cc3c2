#pragma once

#include <stdexcept>
#include <string>

namespace semsegdepth {

/// Base of every error raised by the library. `kind()` is the stable name
/// used in structured CLI error records.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SEMSEGDEPTH_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  }

SEMSEGDEPTH_DEFINE_ERROR(ShapeError);
SEMSEGDEPTH_DEFINE_ERROR(ShapeMismatch);
SEMSEGDEPTH_DEFINE_ERROR(NoEligiblePoints);
SEMSEGDEPTH_DEFINE_ERROR(OutOfBounds);
SEMSEGDEPTH_DEFINE_ERROR(MissingFile);
SEMSEGDEPTH_DEFINE_ERROR(InsufficientSamples);
SEMSEGDEPTH_DEFINE_ERROR(EmptySparseDepth);
SEMSEGDEPTH_DEFINE_ERROR(InvalidClassId);
SEMSEGDEPTH_DEFINE_ERROR(EmptyMask);
SEMSEGDEPTH_DEFINE_ERROR(UnknownVariant);
SEMSEGDEPTH_DEFINE_ERROR(EmptySplit);
SEMSEGDEPTH_DEFINE_ERROR(MissingCheckpoint);
SEMSEGDEPTH_DEFINE_ERROR(IoError);

#undef SEMSEGDEPTH_DEFINE_ERROR

/// Raised when a variant's forward pass needs a sample field that is absent.
class MissingInput : public Error {
 public:
  explicit MissingInput(std::string field)
      : Error("MissingInput", "missing input: " + field), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Config validation failure; `key_path()` is the dotted path of the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string key_path, const std::string& message)
      : Error("ConfigError", key_path + ": " + message), key_path_(std::move(key_path)) {}
  const std::string& key_path() const noexcept { return key_path_; }

 private:
  std::string key_path_;
};

/// Non-finite loss during training.
class Divergence : public Error {
 public:
  explicit Divergence(long step)
      : Error("Divergence", "non-finite loss at step " + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace semsegdepth
