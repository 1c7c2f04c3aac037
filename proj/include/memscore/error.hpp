#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace memscore {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. `row()` is 1-based (header = row 1) or 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t row = 0)
      : Error(row ? what + " (row " + std::to_string(row) + ")" : what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// A value outside its admissible domain (score outside [0,1], bad fraction, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Structurally inconsistent input (duplicate refs, score/response mismatch, empty split).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint magic/version problems and truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, const std::string& detail)
      : Error("training diverged at step " + std::to_string(step) + ": " + detail), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Rank correlation of a constant vector.
class UndefinedCorrelation : public Error {
 public:
  UndefinedCorrelation() : Error("undefined rho: constant input vector") {}
};

class DeadFilterError : public Error {
 public:
  using Error::Error;
};

/// Image bytes that are not a decodable PNG/JPEG.
class DecodeError : public Error {
 public:
  using Error::Error;
};

}  // namespace memscore
