// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace maskgru {

/// Tensor shapes that do not fit an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value outside its documented domain (beta outside [0,1], eps too large, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse: calling something in a state or order it does not support.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or unreadable files and datasets.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when finite-value checking is on and an op produces NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace maskgru
