#pragma once

#include <stdexcept>
#include <string>

namespace tileq {

// Error taxonomy shared across the library. Every failure raised by the core
// derives from Error so callers (CLI, bindings) can map categories to exit
// codes without string matching.

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Operand dimensions disagree (e.g. matmul inner dims, routing widths).
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// A parameter is outside its documented domain (rank, bits, cluster count).
struct ParamError : Error {
    explicit ParamError(const std::string& msg) : Error(msg) {}
};

/// Input exceeds a documented size cap (e.g. the exact-SVD oracle).
struct SizeError : Error {
    explicit SizeError(const std::string& msg) : Error(msg) {}
};

/// Serialized data is malformed: bad magic, checksum mismatch, stray bits.
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

/// Filesystem-level failure while reading or writing a container.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

/// Numerical breakdown (singular Hessian, non-finite intermediate).
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// Input data is unusable (empty calibration set, non-finite statistics).
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

} // namespace tileq
