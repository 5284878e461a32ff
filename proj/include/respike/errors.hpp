#pragma once

#include <stdexcept>

#include "respike/tensor.hpp"

namespace respike {

/// Malformed file contents (bad magic, version, dtype, truncated payload).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The filesystem refused a read or write.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace respike
