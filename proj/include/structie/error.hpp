#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace structie {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a tensor operation receives incompatible shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised by the LHE serializer and prompt builder.
class CodecError : public Error {
 public:
  using Error::Error;
};

/// Raised by the strict LHE parser; carries the byte offset of the failure.
class ParseError : public CodecError {
 public:
  ParseError(std::size_t offset, const std::string& what)
      : CodecError("parse error at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Raised for malformed structures handed to the forest builders.
class StructureError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what) : Error(path + ": " + what), path_(path) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace structie
