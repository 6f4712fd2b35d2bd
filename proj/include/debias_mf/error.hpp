#pragma once

#include <stdexcept>
#include <string>

namespace debias_mf {

// Malformed or inconsistent input data (files, shapes, missing coverage).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Divergence, singular systems, non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed arguments outside an operation's contract.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace debias_mf
