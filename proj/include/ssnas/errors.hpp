// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ssnas {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user-supplied parameters or configuration. CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class StructuralError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class UnsatisfiableImbalanceError : public ConfigError {
 public:
  UnsatisfiableImbalanceError(std::size_t cls, const std::string& msg)
      : ConfigError(msg), class_index(cls) {}
  std::size_t class_index;
};

// Malformed or insufficient input data. CLI exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  FormatError(std::uint64_t offset, const std::string& msg)
      : DataError(msg), byte_offset(offset) {}
  std::uint64_t byte_offset;
};

class InsufficientSamplesError : public DataError {
 public:
  InsufficientSamplesError(std::size_t cls, const std::string& msg)
      : DataError(msg), class_index(cls) {}
  std::size_t class_index;
};

class PriorError : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite values or a diverging objective. CLI exit code 4.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(std::int64_t step_index, const std::string& msg)
      : NumericError(msg), step(step_index) {}
  std::int64_t step;
};

}  // namespace ssnas
