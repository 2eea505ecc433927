#pragma once

#include <stdexcept>
#include <string>

namespace pil {

/// Shapes of operands do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar argument is outside its admissible range.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke a documented precondition (missing gradient, non-binary mask, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A NetworkSpec could not be instantiated.
class BuildError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unknown name in a registry (profiles, model roles).
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// File system or serialization failure; the message carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss or broke the freeze contract.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pil
