// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace loracomp {

/// Base class for every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A scalar or list argument is outside its documented domain.
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Inputs are individually valid but inconsistent with each other
/// (site coverage, label spaces, exhausted transform pools).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Input carries no signal (e.g. all-zero feature matrix for CKA).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// A training sanity check failed; the task or configuration is broken.
class DiagnosticError : public Error {
public:
    using Error::Error;
};

/// On-disk artifact problems. `kind()` distinguishes the failure.
class FormatError : public Error {
public:
    enum class Kind { io, malformed, version_mismatch, hash_mismatch, truncated };

    FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

}  // namespace loracomp
