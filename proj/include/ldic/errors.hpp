#pragma once

#include <stdexcept>
#include <string>

namespace ldic {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shapes, channel counts or config fields that do not fit together.
struct ConfigError : Error {
    using Error::Error;
};

// Depth map does not match the image it is paired with.
struct AlignmentError : Error {
    using Error::Error;
};

// Caller supplied an invalid argument (out-of-range m_lambda, missing depth, ...).
struct UsageError : Error {
    using Error::Error;
};

// Missing or unreadable input files.
struct DataError : Error {
    using Error::Error;
};

// Symbol outside the support of its coding table.
struct EncodeError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    using Error::Error;
};

struct InternalError : Error {
    using Error::Error;
};

struct ParseError : Error {
    enum class Kind { BadMagic, UnsupportedVersion, Truncated, Malformed };

    ParseError(Kind kind, const std::string& what) : Error(what), kind(kind) {}

    Kind kind;
};

}  // namespace ldic
