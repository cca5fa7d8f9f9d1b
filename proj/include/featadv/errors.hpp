#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace featadv {

/// Invalid or inconsistent configuration. `field()` names the offending
/// config path (dot separated, e.g. "weights.tv") when one is known.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& message, std::string field = {})
      : std::runtime_error(field.empty() ? message : field + ": " + message),
        field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Bad runtime input: shapes, bounds, non-finite values.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The optimizer produced a non-finite loss and could not recover.
class OptimizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unknown id in the store.
class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace featadv
