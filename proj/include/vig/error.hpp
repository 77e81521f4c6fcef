#pragma once

#include <stdexcept>
#include <string>

namespace vig {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/extent disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid model / run configuration (bad preset field, divisibility, rates).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Violated operation precondition (non-scalar loss, unfolded BN, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Object used outside its valid lifetime (backward on a consumed tape).
class LifecycleError : public Error {
 public:
  using Error::Error;
};

// Out-of-range index (class label, block index, neighbor index).
class IndexError : public Error {
 public:
  using Error::Error;
};

// Numeric failure at runtime (non-finite values, divergence).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace vig
