#ifndef FUNDUSAM_ERROR_HPP
#define FUNDUSAM_ERROR_HPP

#include <stdexcept>
#include <string>

namespace fundusam {

/// Bad argument value or shape passed by the caller.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A mask that must contain foreground is empty (or too small to use).
class EmptyMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation called on an object in the wrong state (e.g. hooks installed twice).
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Dataset layout or file content problems.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Configuration or checkpoint problems that a user can fix.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

}  // namespace detail
}  // namespace fundusam

#endif  // FUNDUSAM_ERROR_HPP
