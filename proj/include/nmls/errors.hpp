#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nmls {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input text (OBJ/XYZ/JSON). Carries the 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line)
    {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Input violates a documented invariant (sizes, ranges, duplicates, non-finite values).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// The control-point configuration cannot support the requested solve.
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// A numeric routine produced a non-finite value or failed to converge.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace nmls
