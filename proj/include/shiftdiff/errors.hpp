#pragma once

#include <stdexcept>
#include <string>

namespace shiftdiff {

// Every error carries a short machine-readable kind so the CLI can report it
// as JSON without string matching.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Bad arguments: shape mismatch, empty grid, inverted interval.
struct ArgumentError : Error {
  explicit ArgumentError(const std::string& what) : Error("argument", what) {}
};

/// A time or value outside the domain an operation is defined on.
struct DomainError : Error {
  explicit DomainError(const std::string& what) : Error("domain", what) {}
};

/// Evaluation at or beyond the pivot where 1 - eta vanishes.
struct SingularityError : Error {
  explicit SingularityError(const std::string& what) : Error("singularity", what) {}
};

/// The noise schedule and shifting sequence are inconsistent (negative g^2).
struct ScheduleError : Error {
  explicit ScheduleError(const std::string& what) : Error("schedule", what) {}
};

/// Two grid points share a lambda value, so a divided difference is undefined.
struct GridError : Error {
  explicit GridError(const std::string& what) : Error("grid", what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

struct TrainingError : Error {
  explicit TrainingError(const std::string& what) : Error("training", what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};

}  // namespace shiftdiff
