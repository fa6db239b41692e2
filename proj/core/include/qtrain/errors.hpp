#pragma once

#include <stdexcept>
#include <string>

namespace qtrain {

// Invalid configuration: bit widths out of range, bad axes, schema
// violations, incompatible resume settings. CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad data: NaN/Inf fed to a quantizer, unreadable or corrupt files,
// empty corpora. CLI maps this to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Runtime API misuse: shape mismatches, backward without a graph,
// touching gradients that were never produced.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace qtrain
