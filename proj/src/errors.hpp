// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace discovr {

// Base of every library error. The C API maps subclasses to status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Clip or frame dimensions incompatible with the tube/patch grid.
class GeometryError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed manifests, missing records, protocol/data mismatches.
class DataError : public Error {
 public:
  using Error::Error;
};

// Checkpoint or container integrity failures.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

// Non-finite values encountered in forward passes or losses.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace discovr
