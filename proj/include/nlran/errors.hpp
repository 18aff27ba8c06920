#pragma once

#include <stdexcept>
#include <string>

namespace nlran {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents violate an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A scalar was required (backward root, gradient-check objective).
class RankError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible serialized data (tensors, checkpoints, manifests).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced during forward or backward.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid dataset content: bad labels, missing files, undersized scans.
class DataError : public Error {
 public:
  using Error::Error;
};

/// The model lacks a component an operation needs (e.g. no attention module).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace nlran
