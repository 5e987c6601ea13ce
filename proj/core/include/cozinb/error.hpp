#pragma once

#include <stdexcept>
#include <string>

namespace cozinb {

// Error hierarchy. The CLI maps each family onto an exit code.

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed input line. `line` is 1-based; 0 when not tied to a line.
struct ParseError : DataError {
    ParseError(const std::string& what, std::size_t line)
        : DataError(line ? what + " (line " + std::to_string(line) + ")" : what), line(line) {}
    std::size_t line;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace cozinb
