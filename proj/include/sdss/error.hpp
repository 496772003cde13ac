#pragma once

#include <stdexcept>
#include <string>

namespace sdss {

/// Raised for malformed inputs: bad shapes, out-of-range parameters, empty data.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Requested operation has no implementation for the given configuration.
class NotAvailable : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite gradients, overflowing weights, singular systems.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented pairing (e.g. backward without matching forward).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace detail
}  // namespace sdss
