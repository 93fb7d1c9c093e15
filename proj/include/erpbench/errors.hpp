#pragma once

#include <stdexcept>
#include <string>

namespace erpbench {

// Base for all library errors so callers can catch erpbench failures in one place.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument / violated precondition (thresholds, indices, ratios).
struct ArgumentError : Error {
  using Error::Error;
};

// Filter band or frequency-band specification problems (bounds, Nyquist).
struct BandError : Error {
  using Error::Error;
};

// Non-finite samples, degenerate inputs (single channel, all channels bad, ...).
struct DataError : Error {
  using Error::Error;
};

// Matrix / tensor dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};

// Inputs shorter than an operation requires.
struct LengthError : Error {
  using Error::Error;
};

// No usable items produced (e.g. zero mapped events inside the recording).
struct EmptySetError : Error {
  using Error::Error;
};

// Result tables / fixtures with missing cells or inconsistent method sets.
struct CoverageError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Data file does not match its manifest (sizes, offsets).
struct CorruptionError : IoError {
  using IoError::IoError;
};

// Unknown on-disk format version.
struct VersionError : IoError {
  using IoError::IoError;
};

}  // namespace erpbench
