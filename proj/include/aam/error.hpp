#pragma once

#include <stdexcept>
#include <string>

namespace aam {

// Error taxonomy. The CLI maps these onto exit codes (see exit_code()).

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public InputError {
 public:
  using InputError::InputError;
};

class OrderingError : public InputError {
 public:
  using InputError::InputError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public NumericalError {
 public:
  TrainingError(const std::string& what, long step)
      : NumericalError(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// 1 = configuration/input, 2 = I/O, 3 = numerical, 4 = anything else.
inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const InputError*>(&e)) return 1;
  if (dynamic_cast<const IoError*>(&e)) return 2;
  if (dynamic_cast<const NumericalError*>(&e)) return 3;
  return 4;
}

}  // namespace aam
