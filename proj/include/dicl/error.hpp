#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dicl {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: malformed config, out-of-range parameters, broken invariants in
// user-supplied data. The CLI maps these to exit status 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A file record failed to parse. `line` is 1-based; 0 when not line oriented.
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : ValidationError(line == 0 ? what
                                  : "line " + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Transport or protocol failure talking to an answering backend.
class BackendError : public Error {
 public:
  using Error::Error;
};

// The backend answered but no verbalizer could be found in the completion.
class DecodeError : public Error {
 public:
  DecodeError(const std::string& what, std::string raw_completion)
      : Error(what), raw_(std::move(raw_completion)) {}

  const std::string& raw_completion() const noexcept { return raw_; }

 private:
  std::string raw_;
};

}  // namespace dicl
