#pragma once

#include <stdexcept>
#include <string>

namespace dera {

/// Bad input, config or file contents. The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed binary file. Carries the byte offset where parsing failed.
class FormatError : public ValidationError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : ValidationError(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// NaN/Inf produced by a primitive or found in a gradient. Exit code 2.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& op, const std::string& detail)
      : std::runtime_error("numeric failure in '" + op + "': " + detail), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Caller broke an API precondition (wrong shapes, non-scalar loss, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace dera
