#pragma once

#include <stdexcept>
#include <string>

namespace saessv {

// Base of every contract violation raised by the library. The CLI maps
// ConfigError to exit code 2 and every other Error to exit code 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

// Argument outside the mathematical domain of an operation (log of a
// non-positive value, fraction outside (0,1), ...).
struct DomainError : Error {
    using Error::Error;
};

struct NonFiniteError : Error {
    using Error::Error;
};

struct GraphError : Error {
    using Error::Error;
};

struct PreconditionError : Error {
    using Error::Error;
};

// A computed quantity collapsed to something unusable: zero direction,
// single-class subset, all-zero concept vector.
struct DegenerateError : Error {
    using Error::Error;
};

// Missing artifact file or upstream hash mismatch.
struct ArtifactError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

}  // namespace saessv
