#pragma once

#include <stdexcept>
#include <string>

namespace kdx {

// Base class for all toolkit errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor/layer shape mismatches and invalid architecture geometry.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Scalar arguments outside their valid range (temperature <= 0, epsilon < 0, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// Invalid run configuration (bad ratios, empty split, missing teacher, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Problems with dataset content at runtime (missing sample ids, ...).
class DataError : public Error {
public:
    using Error::Error;
};

// Filesystem-level failures.
class IoError : public Error {
public:
    using Error::Error;
};

// What exactly went wrong while parsing a binary or text format.
enum class ParseFault {
    BadMagic,
    BadVersion,
    Truncated,
    TrailingBytes,
    Checksum,
    CountMismatch,
    Unsupported,
    Malformed,
};

// Parser rejection carrying a typed fault so callers can distinguish causes.
class ParseError : public Error {
public:
    ParseError(ParseFault fault_, const std::string& msg) : Error(msg), fault(fault_) {}
    ParseFault fault;
};

}  // namespace kdx
