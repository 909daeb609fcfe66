#pragma once

#include <stdexcept>
#include <string>

namespace spatialgeo {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};

// Violated precondition or broken internal contract.
struct ContractError : Error {
    using Error::Error;
};

struct IndexError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Bad input data (records, annotations, files with schema violations).
struct DataError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Checkpoint-level failures: version mismatch, truncated or corrupt file.
struct LoadError : Error {
    using Error::Error;
};

// Training pipeline used out of order (e.g. stage 2 without a stage-1 checkpoint).
struct StateError : Error {
    using Error::Error;
};

}  // namespace spatialgeo
