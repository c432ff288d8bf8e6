#pragma once

#include <stdexcept>
#include <string>

namespace kdwb {

// Base for every error thrown by the library. Subclasses name the failure
// family so callers (and the CLI exit-code mapping) can tell them apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between tensor operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid model, distillation, run, or benchmark configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data: token ids, TSV rows, prediction logs.
class InputError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. calling backward on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed or incompatible file (checkpoints, tables).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite values reached a place that requires finite ones.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Measurement could not produce a meaningful value (e.g. zero elapsed time).
class HarnessError : public Error {
 public:
  using Error::Error;
};

}  // namespace kdwb
