#pragma once

#include <stdexcept>
#include <string>

namespace icmlm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition or shape violation by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class IncompatibleVersion : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

namespace detail {
[[noreturn]] void throw_contract(const char* expr, const std::string& msg, const char* file, int line);
}  // namespace detail

}  // namespace icmlm

#define ICMLM_REQUIRE(cond, msg)                                               \
  do {                                                                         \
    if (!(cond)) ::icmlm::detail::throw_contract(#cond, (msg), __FILE__, __LINE__); \
  } while (0)
