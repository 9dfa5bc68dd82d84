#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mtts {

// A caller broke an operation's precondition (shape mismatch, bad batch layout).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid static configuration (indivisible channel counts, rate >= 1, g <= 0).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// exp overflow, log of a non-positive value.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Unknown language, speaker or token id.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Non-finite value where a finite one is required (divergence, bad gradient).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace mtts
