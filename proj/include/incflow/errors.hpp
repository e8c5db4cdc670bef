#pragma once

#include <stdexcept>
#include <string>

namespace incflow {

// Malformed or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Input data that violates a schema or alignment contract (CLI exit code 3).
class DataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Non-finite values or failed numerical preconditions (CLI exit code 4).
class NumericalError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

}  // namespace incflow
