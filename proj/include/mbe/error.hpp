#pragma once

#include <stdexcept>
#include <string>

namespace mbe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NotPositiveDefinite : public Error {
public:
    using Error::Error;
};

class NotPSD : public Error {
public:
    using Error::Error;
};

class InvalidSpec : public Error {
public:
    using Error::Error;
};

class InvalidRegime : public Error {
public:
    using Error::Error;
};

class NoUniqueStationary : public Error {
public:
    using Error::Error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

class QuadratureFailure : public Error {
public:
    using Error::Error;
};

/// Experiment configuration rejected; maps to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace mbe
