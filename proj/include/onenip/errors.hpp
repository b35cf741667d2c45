#pragma once

#include <stdexcept>
#include <string>

namespace onenip {

// Shape or size contract violated by an operation's inputs.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf reached a kernel that cannot propagate it meaningfully.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid hyperparameter or configuration value.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Missing files, empty classes or malformed dataset layout.
struct DatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed ONIP container, carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Metric requested on a record where it is undefined (e.g. one class only).
struct UndefinedMetricError : std::domain_error {
    using std::domain_error::domain_error;
};

}  // namespace onenip
