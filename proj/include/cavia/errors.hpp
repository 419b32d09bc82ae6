#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cavia {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or model/data widths.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Argument outside the valid domain of an operation (labels, pixel budget, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// Caller violated an operation's precondition (non-scalar grad output, empty trajectory, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// An op produced a non-finite value from finite inputs.
class NumericError : public Error {
public:
    using Error::Error;
};

class UnsupportedModeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class LoadError : public Error {
public:
    using Error::Error;
};

// Training diverged (non-finite or exploding loss). Carries the outer iteration
// and, when known, the index of the task inside the meta-batch.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, long iteration, long task_index = -1)
        : Error(what + " (iteration " + std::to_string(iteration) +
                (task_index >= 0 ? ", task " + std::to_string(task_index) : std::string()) + ")"),
          reason_(what), iteration_(iteration), task_index_(task_index) {}

    // The message without the location suffix.
    const std::string& reason() const noexcept { return reason_; }
    long iteration() const noexcept { return iteration_; }
    long task_index() const noexcept { return task_index_; }

private:
    std::string reason_;
    long iteration_;
    long task_index_;
};

}  // namespace cavia
