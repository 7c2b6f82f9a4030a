#ifndef TRL_ERRORS_HPP
#define TRL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace trl {

// bad user input: malformed config, inconsistent shapes requested by caller
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// tensor dimensions do not line up
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// non-finite values or other numerical breakdown at runtime
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingDivergence : NumericError {
  using NumericError::NumericError;
};

// a Cholesky (or similar) factorization failed
struct FactorizationError : NumericError {
  using NumericError::NumericError;
};

// the frame lost a column during re-orthonormalization
struct TransportRankError : NumericError {
  TransportRankError(const std::string& what, int column_index)
      : NumericError(what), column(column_index) {}
  int column;
};

}  // namespace trl

#endif
