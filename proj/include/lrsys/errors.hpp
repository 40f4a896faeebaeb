#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace lrsys {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Inputs with mismatched sizes or otherwise malformed shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A precondition on the numerical input was violated (non-unit vector,
/// non-SPD operator, constraint residual too large, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Gram matrix or linear map became singular: the configuration is a zero of
/// a measure density.
class DegenerateConfiguration : public Error {
public:
    using Error::Error;
};

/// Step-size underflow inside the ODE integrator. Carries the last accepted
/// state so callers can report partial results.
class IntegrationError : public Error {
public:
    IntegrationError(const std::string& what, double t, Eigen::VectorXd last)
        : Error(what), last_time(t), last_state(std::move(last)) {}

    double last_time;
    Eigen::VectorXd last_state;
};

/// Validation error for scenario files; `path` names the offending field.
class ConfigError : public Error {
public:
    ConfigError(const std::string& path, const std::string& what)
        : Error(path + ": " + what), field_path(path) {}

    std::string field_path;
};

}  // namespace lrsys
