#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mtst {

// Root of every error thrown by the library. The command-line front end maps
// the concrete subclasses onto exit codes, so throw the most specific one.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible with an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A reduction or constructor received an empty extent.
class EmptyInputError : public DimensionError {
 public:
  using DimensionError::DimensionError;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Configuration values are inconsistent (for example alpha > 0 without reverse text).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An image id has no row in an embedding table or gallery.
class MissingEmbeddingError : public Error {
 public:
  explicit MissingEmbeddingError(const std::string& id)
      : Error("no embedding for image id '" + id + "'"), id_(id) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

// Text input (JSONL, config) failed to parse. Carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& message)
      : Error(source + ":" + std::to_string(line) + ": " + message), source_(source), line_(line) {}
  const std::string& source() const noexcept { return source_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string source_;
  std::size_t line_;
};

// Binary input (checkpoint, embedding file) is malformed at a byte offset.
class FormatError : public Error {
 public:
  FormatError(const std::string& source, std::uint64_t offset, const std::string& message)
      : Error(source + " @ byte " + std::to_string(offset) + ": " + message), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// The filesystem refused a read or write.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mtst
