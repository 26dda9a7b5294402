#pragma once

#include <stdexcept>
#include <string>

namespace midilm {

/// Base class of every error raised for bad input data or a violated
/// operation precondition. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Error carrying a module-specific kind enum.
template <typename Kind>
class KindedError : public Error {
 public:
  KindedError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace midilm
