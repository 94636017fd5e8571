#pragma once

#include <stdexcept>
#include <string>

namespace firtree {

// Invalid numeric input (non-finite values, bad ranges).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Vector/matrix shape disagreement.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed tree spec, ratings file, design file or fit artifact.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inner or outer optimizer failure.
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace firtree
