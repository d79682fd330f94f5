#pragma once

#include <stdexcept>
#include <string>

namespace osediff {

/// Base of every error raised by the library. Captures the native call stack
/// at construction so the CLI can print it for internal failures.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message);

  const std::string& backtrace() const noexcept { return backtrace_; }

 private:
  std::string backtrace_;
};

/// Invalid configuration value, unknown key, or unusable option combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not satisfy an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Index outside its admissible range (timesteps, counts).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or codec failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A training stage failed to meet its quality floor or produced
/// non-finite values.
class TrainingFailure : public Error {
 public:
  using Error::Error;
};

/// The prompt extractor failed (external command error, unreadable output).
class ExtractorError : public Error {
 public:
  using Error::Error;
};

}  // namespace osediff
