#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace taat {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/map dimensions do not line up.
struct ShapeError : Error {
    using Error::Error;
};

// A scalar/config argument is outside its valid range.
struct ParameterError : Error {
    using Error::Error;
};

// Weight-file or manifest parsing failure. Offset is the byte position
// where the problem was detected.
struct FormatError : Error {
    std::size_t offset = 0;
    FormatError(const std::string& msg, std::size_t at)
        : Error(msg + " (byte offset " + std::to_string(at) + ")"), offset(at) {}
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

struct LabelError : Error {
    using Error::Error;
};

struct LossError : Error {
    using Error::Error;
};

struct SamplingError : Error {
    using Error::Error;
};

struct TrainError : Error {
    using Error::Error;
};

struct EvalError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct InitError : Error {
    using Error::Error;
};

}  // namespace taat
