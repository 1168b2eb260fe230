#pragma once

#include <stdexcept>
#include <string>

namespace aurec {

// Error taxonomy shared by the library and the CLI exit-code mapping.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller broke an API contract (wrong call sequence, non-scalar backward, ...).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed on-disk data; message carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training aborted (NaN loss/gradient); the last good checkpoint is kept.
struct TrainAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace aurec
