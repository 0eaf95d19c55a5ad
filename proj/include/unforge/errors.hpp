#pragma once

#include <stdexcept>
#include <string>

namespace unforge {

// Error taxonomy. The CLI maps these onto process exit codes:
// config -> 2, numeric -> 3, io -> 4, usage/structural -> 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct GraphError : std::runtime_error {
    explicit GraphError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace unforge
