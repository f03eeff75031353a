#pragma once

#include <stdexcept>
#include <string>

namespace ibgc {

/// Broad failure classes. The CLI maps them onto exit codes.
enum class ErrorKind { usage, data, numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Shape mismatch, bad argument, unknown option.
inline Error usage_error(const std::string& what) { return {ErrorKind::usage, what}; }
/// Malformed or inconsistent input files and datasets.
inline Error data_error(const std::string& what) { return {ErrorKind::data, what}; }
/// NaN/Inf, divergence, domain violations.
inline Error numeric_error(const std::string& what) { return {ErrorKind::numeric, what}; }

}  // namespace ibgc
