#pragma once

#include <stdexcept>
#include <string>

namespace grail {

/// Violated precondition of a public operation (CLI exit code 2).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shapes that do not conform.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Malformed input file. The message names the entry and line.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File parses but disagrees with its own header.
class SchemaError : public ParseError {
 public:
  using ParseError::ParseError;
};

/// A pipeline stage was asked to run before its upstream artifact exists
/// (CLI exit code 3).
class StageDependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

inline void require_dims(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

}  // namespace grail
