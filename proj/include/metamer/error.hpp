#pragma once

#include <stdexcept>
#include <string>

namespace metamer {

// Base for every error the library throws. `code()` is a stable,
// machine-readable identifier used in CLI diagnostics and HTTP bodies.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension_error", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

class StructureError : public Error {
 public:
  explicit StructureError(const std::string& what) : Error("structure_error", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io_error", what) {}
};

}  // namespace metamer
