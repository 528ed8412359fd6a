#pragma once

#include <stdexcept>
#include <string>

namespace rfs {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct NoSolutionError : Error {
    using Error::Error;
};

// Evaluation hit a pole of a closed-form transform.
struct PoleError : Error {
    double location;
    PoleError(const std::string& what, double where) : Error(what), location(where) {}
};

// Ridgeless problem sits exactly on a double-descent point.
struct SingularRegimeError : Error {
    using Error::Error;
};

struct DivergentRiskError : Error {
    using Error::Error;
};

struct ConvergenceError : Error {
    double residual;
    ConvergenceError(const std::string& what, double res) : Error(what), residual(res) {}
};

struct DegenerateError : Error {
    using Error::Error;
};

struct InsufficientReplicationError : Error {
    using Error::Error;
};

}  // namespace rfs
