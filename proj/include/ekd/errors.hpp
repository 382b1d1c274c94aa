#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ekd {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or channel counts.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid argument, specification field or configuration value.
class ValueError : public Error {
public:
    using Error::Error;
};

/// Configuration text problem, carrying the 1-based line it was found on (0 if global).
class ConfigError : public ValueError {
public:
    ConfigError(std::size_t line, const std::string& msg)
        : ValueError(line == 0 ? msg : "line " + std::to_string(line) + ": " + msg), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Malformed or corrupted file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss or parameter update.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace ekd
