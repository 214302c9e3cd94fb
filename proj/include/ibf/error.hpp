#pragma once

#include <stdexcept>
#include <string>

namespace ibf {

/// Invalid configuration values or violated preconditions on configs.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions that do not fit an operation.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of a function.
class DomainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing, unreadable or malformed input data.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace ibf
