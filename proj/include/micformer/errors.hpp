// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace micformer {

using Shape = std::vector<std::size_t>;

/// Operand extents are incompatible with the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input lies outside an operation's mathematical domain (sqrt of a negative, 1/0, NaN coordinates).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Misuse of the differentiation tape.
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed, truncated or corrupted files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (unknown keys, out-of-range values, empty splits).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numeric failure during training (non-finite loss).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

}  // namespace micformer
