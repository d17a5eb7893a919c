#pragma once

#include <stdexcept>
#include <string>

namespace cteach {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes that do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input data (unknown ids, bad label maps).
class DataError : public Error {
public:
    using Error::Error;
};

/// API misuse, e.g. a tape replayed twice.
class UsageError : public Error {
public:
    using Error::Error;
};

/// A postcondition of an internal step was violated.
class InternalError : public Error {
public:
    using Error::Error;
};

/// File could not be read or written, or its contents are malformed.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace cteach
