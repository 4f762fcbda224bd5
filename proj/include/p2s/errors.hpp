#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace p2s {

// Shapes of two operands are incompatible for the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A count or index argument is out of its admissible range (e.g. K > N).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller violated a documented precondition (non-scalar loss, empty area...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A reduction was requested over zero elements.
class EmptyReductionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Invalid configuration: unknown keys, bad values, out-of-range rates.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input data is missing, inconsistent or out of the declared label ranges.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A text file could not be parsed; carries the 1-based line number.
class ParseError : public DataError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace p2s
