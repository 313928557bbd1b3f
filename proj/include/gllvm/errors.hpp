#pragma once

#include <stdexcept>
#include <string>

namespace gllvm {

/// Base class for all errors thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or consistency violation; the message names the offending matrix.
struct DimensionError : Error {
  using Error::Error;
};

/// A value outside the family support or an invalid parameter domain.
struct DomainError : Error {
  using Error::Error;
};

/// Non-finite numerical evaluation, tagged with where it happened.
struct NumericError : Error {
  int unit = -1;
  int response = -1;
  double eta = 0.0;
  NumericError(const std::string& msg, int unit_, int response_, double eta_)
      : Error(msg + " (unit " + std::to_string(unit_) + ", response " +
              std::to_string(response_) + ", eta " + std::to_string(eta_) + ")"),
        unit(unit_),
        response(response_),
        eta(eta_) {}
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// An iterative solver failed to converge.
struct ConvergenceError : Error {
  int unit = -1;
  ConvergenceError(const std::string& msg, int unit_)
      : Error(msg + " (unit " + std::to_string(unit_) + ")"), unit(unit_) {}
  explicit ConvergenceError(const std::string& msg) : Error(msg) {}
};

/// Invalid user-supplied configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// File or format problem; message carries path and, where known, line number.
struct IoError : Error {
  using Error::Error;
};

}  // namespace gllvm
