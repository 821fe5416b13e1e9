#pragma once

#include <stdexcept>
#include <string>

namespace ucam {

// Bad input, bad configuration, violated precondition. CLI exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// An operation produced NaN/Inf. CLI exit code 3.
class NumericalFault : public std::runtime_error {
 public:
  explicit NumericalFault(const std::string& what) : std::runtime_error(what) {}
};

// File could not be opened, read, or written.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ucam
