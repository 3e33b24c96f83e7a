// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sisma {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor dimension mismatch; the message names the offending dimension.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid input data or configuration value.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Non-finite value detected during computation.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Bad config file, unknown key, or resume fingerprint mismatch.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Filesystem / OS level failure.
class IoError : public Error {
public:
    using Error::Error;
};

/// Corrupt or truncated checkpoint file.
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// Checkpoint format version not supported by this build.
class MigrationError : public Error {
public:
    using Error::Error;
};

} // namespace sisma
