// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tengrad {

// Error taxonomy. Everything derives from Error so callers can catch the
// family; the concrete type names the broken contract.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what_arg) : std::runtime_error(what_arg) {}
};

// Operand shapes incompatible with the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A numeric contract failed: non-finite value, asymmetry beyond tolerance,
// solve residual beyond tolerance.
class NumericError : public Error {
public:
    using Error::Error;
};

// An API contract was violated: stale cache, schema mismatch, index out of
// range, size cap exceeded.
class ContractError : public Error {
public:
    using Error::Error;
};

// SPD factorization met a non-positive pivot. The operand is indefinite at
// working precision; raising the damping term is the intended remedy.
class DampingError : public Error {
public:
    using Error::Error;
};

// Malformed binary or text input. For binary formats the message carries the
// byte offset of the first bad field.
class FormatError : public Error {
public:
    using Error::Error;
};

// Config field rejected. The message names the offending section.key.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Runtime data rejected: class label out of range, sample count mismatch.
class InputError : public Error {
public:
    using Error::Error;
};

}  // namespace tengrad
