// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace zlora {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible. The message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// An operation was called outside its contract (wrong variant, non-scalar
/// loss, missing/forbidden argument).
struct ContractError : Error {
    using Error::Error;
};

/// Lookup of an unknown language id.
struct KeyError : Error {
    using Error::Error;
};

/// Invalid configuration value or combination.
struct ConfigError : Error {
    using Error::Error;
};

/// A requested structure (e.g. a similarity target) is unrealizable.
struct StructureError : Error {
    using Error::Error;
};

/// Checkpoint/config mismatch during warm-start or reload.
struct CompatibilityError : Error {
    using Error::Error;
};

/// A run directory is missing declared artifacts. `missing` lists them.
struct IncompleteRunError : Error {
    IncompleteRunError(const std::string& msg, std::vector<std::string> missing_paths)
        : Error(msg), missing(std::move(missing_paths)) {}
    std::vector<std::string> missing;
};

} // namespace zlora
