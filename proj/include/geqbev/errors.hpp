#pragma once

#include <stdexcept>
#include <string>

namespace geqbev {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class InvalidHyperparameter : public Error {
 public:
  using Error::Error;
};

class NonScalarLoss : public Error {
 public:
  using Error::Error;
};

class NonSquareGrid : public Error {
 public:
  using Error::Error;
};

class GroupOrderMismatch : public Error {
 public:
  using Error::Error;
};

class InvalidKernelShape : public Error {
 public:
  using Error::Error;
};

class UnknownPoolMethod : public Error {
 public:
  using Error::Error;
};

class PlacementFailure : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace geqbev
