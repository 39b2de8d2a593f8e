#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mixssm {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes violate an op's broadcasting, contraction, or axis rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value became (or was given as) NaN or infinite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid architectural or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Image decoding, dataset layout, or synthetic-generation failure.
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { io, bad_magic, bad_version, truncated, malformed_header, shape_mismatch, config_mismatch };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Training hit a non-finite loss or gradient.
class TrainingAborted : public Error {
 public:
  TrainingAborted(std::size_t batch, double loss, const std::string& what)
      : Error(what), batch_(batch), loss_(loss) {}

  std::size_t batch() const noexcept { return batch_; }
  double loss() const noexcept { return loss_; }

 private:
  std::size_t batch_;
  double loss_;
};

}  // namespace mixssm
