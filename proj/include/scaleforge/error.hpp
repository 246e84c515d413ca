// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace scaleforge {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation requires.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid configuration or argument; the CLI maps this to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

// NaN/inf encountered in a loss or gradient; the CLI maps this to exit code 3.
class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace scaleforge
