#pragma once

#include <stdexcept>
#include <string>

namespace asrl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

// Raised by the optimizer when a gradient contains NaN or Inf.
struct UpdateRejected : Error {
  using Error::Error;
};

struct EpisodeFinished : Error {
  using Error::Error;
};

struct NonFiniteLoss : Error {
  using Error::Error;
};

struct GenerationError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace asrl
