#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vbltr {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mode index outside 0..M-1.
class ModeIndexError : public Error {
 public:
  using Error::Error;
};

/// Shapes, dims or lengths that do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid prior constants or rank.
class HyperparamError : public Error {
 public:
  using Error::Error;
};

/// Threshold selection on data it cannot handle (e.g. one class only).
class ThresholdError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset / model contents or files.
class DataError : public Error {
 public:
  using Error::Error;
};

class MagicError : public DataError {
 public:
  using DataError::DataError;
};

class TruncationError : public DataError {
 public:
  using DataError::DataError;
};

class LabelError : public DataError {
 public:
  using DataError::DataError;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

/// A variational update lost positive definiteness or produced non-finite values.
class NumericalBreakdown : public Error {
 public:
  NumericalBreakdown(std::string block, int mode, int component, int iteration,
                     const std::string& what)
      : Error(what + " [block=" + block + " mode=" + std::to_string(mode) +
              " component=" + std::to_string(component) +
              " iteration=" + std::to_string(iteration) + "]"),
        block_(std::move(block)),
        mode_(mode),
        component_(component),
        iteration_(iteration) {}

  const std::string& block() const noexcept { return block_; }
  int mode() const noexcept { return mode_; }
  int component() const noexcept { return component_; }
  int iteration() const noexcept { return iteration_; }

  NumericalBreakdown at_iteration(int it) const {
    return NumericalBreakdown(block_, mode_, component_, it, base_message());
  }

 private:
  std::string base_message() const {
    std::string w = what();
    auto pos = w.rfind(" [block=");
    return pos == std::string::npos ? w : w.substr(0, pos);
  }

  std::string block_;
  int mode_;
  int component_;
  int iteration_;
};

}  // namespace vbltr
