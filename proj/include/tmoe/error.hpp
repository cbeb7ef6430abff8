#pragma once

#include <stdexcept>
#include <string>

namespace tmoe {

// Machine-parseable error categories; the CLI prints these as the first
// token of its single-line error message.
enum class ErrorCategory {
  kDimension,
  kIndex,
  kContract,
  kConfig,
  kUnknownTask,
  kFormat,
  kIo,
  kDivergence,
  kDegenerateBatch,
  kMerge,
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kDimension: return "dimension";
    case ErrorCategory::kIndex: return "index";
    case ErrorCategory::kContract: return "contract";
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kUnknownTask: return "unknown_task";
    case ErrorCategory::kFormat: return "format";
    case ErrorCategory::kIo: return "io";
    case ErrorCategory::kDivergence: return "divergence";
    case ErrorCategory::kDegenerateBatch: return "degenerate_batch";
    case ErrorCategory::kMerge: return "merge";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory category, const std::string& message) {
  throw Error(category, message);
}

inline void require(bool condition, ErrorCategory category, const std::string& message) {
  if (!condition) fail(category, message);
}

}  // namespace tmoe
