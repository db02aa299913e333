#pragma once

#include <stdexcept>
#include <string>

namespace qbsde {

/// Invalid configuration: bad dimensions, violated preconditions, unknown names.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A coefficient or intermediate quantity evaluated to a non-finite value.
class EvaluationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace qbsde
