#pragma once

#include <stdexcept>
#include <string>

namespace photogeo {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class OutOfRange : public Error {
 public:
  using Error::Error;
};

/// log() was asked for a rotation whose angle is (numerically) pi.
class DegenerateRotation : public Error {
 public:
  using Error::Error;
};

/// Not enough points / voxels survived extraction to form constraints.
class InsufficientGeometry : public Error {
 public:
  using Error::Error;
};

/// Too few surfel or feature matches to start an alignment solve.
class InsufficientConstraints : public Error {
 public:
  using Error::Error;
};

/// Normal equations too badly conditioned to trust the estimate.
class DegenerateAlignment : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace photogeo
