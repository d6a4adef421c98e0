#pragma once

#include <stdexcept>
#include <string>

namespace forge {

// Invalid or inconsistent configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition.
struct ContractViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Missing or unreadable input artifacts (CLI exit code 3).
struct IngestionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A pipeline stage was started before its inputs exist (CLI exit code 3).
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite loss or state during optimization (CLI exit code 4).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace forge
