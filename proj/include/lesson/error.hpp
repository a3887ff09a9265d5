#pragma once

#include <stdexcept>
#include <string>

namespace lesson {

/// Base of every error raised by the library. `kind()` is a short stable tag
/// used by the CLI when it prints a machine-parsable error line.
class Error : public std::runtime_error {
public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

private:
  std::string kind_;
};

struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error("parse", what) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

/// Topology problems (islands without a slack bus and similar).
struct ModelError : Error {
  explicit ModelError(const std::string& what) : Error("model", what) {}
};

struct ObservabilityError : Error {
  explicit ObservabilityError(const std::string& what) : Error("observability", what) {}
};

/// Precondition or shape violations by the caller.
struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

struct TrainingError : Error {
  explicit TrainingError(const std::string& what) : Error("training", what) {}
};

struct PoolError : Error {
  PoolError(const std::string& what, std::size_t eligible)
      : Error("pool", what), eligible_(eligible) {}
  std::size_t eligible() const noexcept { return eligible_; }

private:
  std::size_t eligible_;
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace lesson
