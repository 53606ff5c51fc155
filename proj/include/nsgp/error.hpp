#pragma once

#include <stdexcept>
#include <string>

namespace nsgp {

/// Validation errors are caller mistakes (bad input, bad config); numerical
/// errors come from the math (non-SPD covariance, solver failure).
enum class ErrorKind { validation, numerical };

/// Every failure raised by the library. The category is a stable short tag
/// such as "invalid-parameter" or "pcg-failure"; the CLI prints it verbatim.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& detail,
        ErrorKind kind = ErrorKind::validation)
      : std::runtime_error(detail), category_(std::move(category)), kind_(kind) {}

  const std::string& category() const noexcept { return category_; }
  ErrorKind kind() const noexcept { return kind_; }

 private:
  std::string category_;
  ErrorKind kind_;
};

inline Error validation_error(std::string category, const std::string& detail) {
  return Error(std::move(category), detail, ErrorKind::validation);
}

inline Error numerical_error(std::string category, const std::string& detail) {
  return Error(std::move(category), detail, ErrorKind::numerical);
}

}  // namespace nsgp
