#pragma once

#include <stdexcept>
#include <string>

namespace mudi {

// Error hierarchy used across the pipeline. Every module throws one of
// these; the CLI maps them to exit codes and stage names.

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file (bad JSON, bad container magic, ...).
class ParseError : public Error {
public:
    using Error::Error;
};

// Input violates a documented data invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

// Bad argument to an operation (out-of-range parameter etc.).
class ArgumentError : public Error {
public:
    using Error::Error;
};

// Inconsistent tensor/matrix dimensions.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Operation called in the wrong state (e.g. unannotated dialogue).
class StateError : public Error {
public:
    using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// NaN/Inf surfaced during loss or gradient computation.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace mudi
