#pragma once

#include <stdexcept>
#include <string>

namespace lsiq {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// shape mismatch between operands
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// non-finite or otherwise out-of-domain numeric input
struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

// invalid configuration (bits out of range, group size mismatch, ...)
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// malformed file content; message names the violated constraint
struct ParseError : Error {
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

// calibration diverged or could not proceed
struct TrainError : Error {
    explicit TrainError(const std::string& msg) : Error(msg) {}
};

} // namespace lsiq
