#pragma once

#include <stdexcept>
#include <string>

namespace fskws {

enum class ErrorKind {
    InvalidArgument,
    Shape,
    Numeric,
    State,
    Format,
    Config,
    Sampling,
    Io,
};

const char* to_string(ErrorKind kind) noexcept;

/// Base of every exception thrown by the library. The kind maps one-to-one
/// onto the status codes of the C API.
class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

class ShapeError : public Error {
   public:
    explicit ShapeError(const std::string& what) : Error(ErrorKind::Shape, what) {}
};

class NumericError : public Error {
   public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

class StateError : public Error {
   public:
    explicit StateError(const std::string& what) : Error(ErrorKind::State, what) {}
};

/// Malformed file. Carries the 1-based line number when known (0 otherwise).
class FormatError : public Error {
   public:
    FormatError(const std::string& what, std::size_t line = 0)
        : Error(ErrorKind::Format, line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

   private:
    std::size_t line_;
};

class ConfigError : public Error {
   public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class SamplingError : public Error {
   public:
    explicit SamplingError(const std::string& what) : Error(ErrorKind::Sampling, what) {}
};

class IoError : public Error {
   public:
    explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

class InvalidArgument : public Error {
   public:
    explicit InvalidArgument(const std::string& what) : Error(ErrorKind::InvalidArgument, what) {}
};

}  // namespace fskws
