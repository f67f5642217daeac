#pragma once

#include <stdexcept>
#include <string>

namespace bstnn {

// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A documented precondition of an operation was violated.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// An argument is outside the mathematical domain (e.g. non-positive scale).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Malformed or missing input data, I/O failures.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN or infinity detected where a finite value is required.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace bstnn
