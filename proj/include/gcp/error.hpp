#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gcp {

enum class ErrorCategory {
  kUsage,
  kConfig,
  kIo,
  kFormat,
  kDimensionMismatch,
  kNonFinite,
  kMissingColumn,
  kEmptyInput,
  kDuplicateId,
  kUnknownClass,
  kUnknownCamera,
  kNumeric,
};

std::string_view category_name(ErrorCategory category);

/// Every failure raised by the library carries a machine-readable category so
/// the CLI can report it on a single line.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

}  // namespace gcp
