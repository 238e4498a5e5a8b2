#pragma once

#include <stdexcept>
#include <string>

namespace longalign {

// Bad or inconsistent run configuration (unknown keys, variant/checkpoint
// mismatch, invalid hyperparameters).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input data that cannot be used: malformed files, shape mismatches,
// empty datasets.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed file contents, optionally tied to a line number.
class FormatError : public DataError {
public:
    explicit FormatError(const std::string& what, long line = -1)
        : DataError(line >= 0 ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}
    long line() const noexcept { return line_; }

private:
    long line_;
};

// Violated uniqueness or referential constraints in otherwise well-formed data.
class IntegrityError : public DataError {
public:
    using DataError::DataError;
};

// A metric or estimator is undefined on the supplied input (for example a
// C-index without comparable pairs).
class UndefinedMetric : public DataError {
public:
    using DataError::DataError;
};

}  // namespace longalign
