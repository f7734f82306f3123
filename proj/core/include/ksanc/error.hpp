#pragma once

#include <stdexcept>
#include <string>

namespace ksanc {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operator's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration or command-line input.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable dataset / run / checkpoint files.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A loss term became NaN or infinite during training.
class DivergenceError : public Error {
 public:
  DivergenceError(std::string component, const std::string& what)
      : Error(what), component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace ksanc
