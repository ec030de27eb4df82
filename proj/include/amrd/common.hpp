#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace amrd {

// Error taxonomy. The C API maps these onto stable status codes, the CLI
// onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent configuration / arguments.
struct ConfigError : Error {
  using Error::Error;
};

// Tensor shape or dimension contract violation.
struct ShapeError : Error {
  using Error::Error;
};

// Non-finite values or numeric breakdown.
struct NumericError : Error {
  using Error::Error;
};

// Checkpoint integrity: bad magic, version, hash, truncation.
struct CheckpointError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

inline const char* version_string() { return "0.1.0"; }

}  // namespace amrd
