#pragma once

#include <stdexcept>
#include <string>

namespace ftn {

/// Failure categories. The CLI maps each one to its process exit code.
enum class ErrorCategory : int {
    generic = 1,
    config = 2,
    data = 3,
    numeric = 4,
    io = 5,
    shape = 6,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error(ErrorCategory::shape, what) {}
};

/// NaN/Inf encountered, or training diverged.
struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorCategory::numeric, what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorCategory::config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorCategory::data, what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorCategory::io, what) {}
};

} // namespace ftn
