#pragma once

#include <stdexcept>
#include <string>

namespace nsd {

// Base of every error the library throws. Subclasses map onto the CLI exit
// codes (see nsd/cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ContractViolation : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class FingerprintMismatch : public Error {
 public:
  using Error::Error;
};

class DegenerateSegmentError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class OracleCapError : public Error {
 public:
  using Error::Error;
};

// A loss or gradient stopped being finite.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace nsd
