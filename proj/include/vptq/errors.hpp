#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vptq {

// Base type for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad magic, malformed header, unsupported dtype, wrong rank.
class FormatError : public Error {
public:
    using Error::Error;
};

// Recognized file but a layout we refuse (e.g. fortran order).
class UnsupportedLayout : public Error {
public:
    using Error::Error;
};

// NaN or Inf in loaded data. Index of the first offender.
class NonFiniteData : public Error {
public:
    NonFiniteData(std::size_t index, const std::string& what)
        : Error(what), index(index) {}
    std::size_t index;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

// Cholesky hit a non-positive pivot.
class NotPositiveDefinite : public Error {
public:
    NotPositiveDefinite(std::size_t pivot, const std::string& what)
        : Error(what), pivot(pivot) {}
    std::size_t pivot;
};

// A numeric check failed after the math formally succeeded
// (e.g. inverse residual too large).
class NumericError : public Error {
public:
    using Error::Error;
};

// k-means asked for more clusters than vectors.
class InsufficientData : public Error {
public:
    using Error::Error;
};

// Codebook size that is not a supported power of two.
class InvalidK : public Error {
public:
    using Error::Error;
};

// Hessian data unusable where required (non-positive diagonal, asymmetry).
class InvalidHessian : public Error {
public:
    using Error::Error;
};

// An index does not fit the requested bitwidth. Position of the offender.
class IndexOverflow : public Error {
public:
    IndexOverflow(std::size_t position, const std::string& what)
        : Error(what), position(position) {}
    std::size_t position;
};

// Packed bitstream inconsistent with its declared count/bitwidth.
class CorruptStream : public Error {
public:
    using Error::Error;
};

// Container-level damage: truncation, checksum mismatch, bad section.
class CorruptContainer : public Error {
public:
    using Error::Error;
};

// Stored index out of range for its codebook.
class CorruptIndices : public Error {
public:
    using Error::Error;
};

}  // namespace vptq
