#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ssmlab {

/// Invalid scheme parameters, unsupported option combinations, malformed specs.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Argument outside the domain of a mathematical operation.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Mismatched dimensions between arguments.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A computation produced a non-finite value. `step()` names the time step.
class NumericError : public std::runtime_error {
public:
    NumericError(const std::string& what, std::size_t step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

} // namespace ssmlab
