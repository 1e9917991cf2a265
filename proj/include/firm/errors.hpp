#pragma once

#include <stdexcept>
#include <string>

namespace firm {

// Caller passed something outside an operation's contract.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input data on disk is missing, unreadable or malformed.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Guidance kind that no configured segmenter can handle (e.g. text without an adapter).
class UnsupportedGuidance : public std::runtime_error {
 public:
  UnsupportedGuidance(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// An internal invariant was broken (test hook for freezing and similar contracts).
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace firm
