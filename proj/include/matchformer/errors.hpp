#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace matchformer {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents, invalid axes, indivisible spatial sizes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a forward op, or a loss that went non-finite.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Rank-deficient geometry (collinear samples, no consensus).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Malformed file content; carries the byte offset where parsing stopped.
class ParseError : public IoError {
 public:
  ParseError(const std::string& path, std::int64_t offset, const std::string& what)
      : IoError(path, "parse error at byte offset " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::int64_t offset() const noexcept { return offset_; }

 private:
  std::int64_t offset_;
};

}  // namespace matchformer
