#pragma once

#include <stdexcept>
#include <string>

namespace voltctrl {

// Malformed input: bad files, inconsistent dimensions, invalid topologies.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A numerical routine failed in a way the caller cannot recover from by itself.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, int step = -1)
      : std::runtime_error(what), step_(step) {}

  int step() const { return step_; }

 private:
  int step_;
};

}  // namespace voltctrl
