#pragma once

#include <stdexcept>
#include <string>

namespace lipol {

/// Bad user input: invalid configuration, malformed files, violated
/// preconditions on public entry points. Maps to CLI exit code 1.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A file that could not be parsed or carries an unsupported format version.
class FormatError : public UsageError {
public:
    using UsageError::UsageError;
};

/// Numerical failure: non-convergence, unidentifiable parameters.
/// Maps to CLI exit code 2.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class QuadratureError : public NumericalError {
public:
    QuadratureError(const std::string& what, double achieved_error)
        : NumericalError(what), achieved_error_(achieved_error) {}

    double achieved_error() const noexcept { return achieved_error_; }

private:
    double achieved_error_;
};

/// Fringe contrast indistinguishable from zero; the phase is not identifiable.
class DegenerateFringeError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

} // namespace lipol
