#pragma once

#include <stdexcept>
#include <string>

namespace cdef {

/// Invalid argument to a density, sampler or score (non-positive z, bad params).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Bad model or experiment configuration. CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or missing input data. CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite estimate or diverged optimisation. CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cdef
