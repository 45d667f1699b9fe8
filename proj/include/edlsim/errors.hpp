#pragma once

#include <stdexcept>
#include <string>

namespace edlsim {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid configuration or precondition violation (bad orders, out-of-range
/// physical parameters, malformed config files, unknown keys).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A state-dependent evaluation failed (e.g. non-positive concentration fed
/// to a model that takes log c or scales conductivity by c).  The implicit
/// stepper treats this as a recoverable event and retries with a smaller
/// step.
class EvaluationError : public Error {
public:
    using Error::Error;
};

/// The algebraic system's matrix is numerically singular.  This indicates a
/// structural misconfiguration (boundary patching or reference row missing),
/// not a bad state, so it is not retried.
class SingularSystemError : public Error {
public:
    using Error::Error;
};

/// Time integration failed (step size underflow, Newton breakdown that
/// halving cannot fix).  Carries the failing time and segment in the message.
class SolverError : public Error {
public:
    using Error::Error;
};

/// Filesystem / output failure.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace edlsim
