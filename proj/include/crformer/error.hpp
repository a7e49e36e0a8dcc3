#pragma once

#include <stdexcept>
#include <string>

namespace crformer {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents are incompatible with the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A model or operation was configured with unusable hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A softmax row had no unmasked entry.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values showed up where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// The synthetic scene generator could not satisfy its request.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or stream contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad command-line or API selector (unknown subcommand, axis, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace crformer
