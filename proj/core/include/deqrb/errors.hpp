#pragma once

#include <stdexcept>
#include <string>

namespace deqrb {

/// Raised when a caller breaks an operation's precondition (shape mismatch,
/// out-of-range index, non-finite scalar argument).
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised for malformed external input: bad config, checkpoint or IDX file.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool ok, const char* what) {
  if (!ok) throw ContractViolation(what);
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

}  // namespace deqrb
