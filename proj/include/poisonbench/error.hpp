#pragma once

#include <stdexcept>
#include <string>

namespace pb {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape_error"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config_error"; }
};

class DataError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "data_error"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io_error"; }
};

// Raised when poison crafting cannot produce a finite objective.
class AttackError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "attack_error"; }
};

}  // namespace pb
