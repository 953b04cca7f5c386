#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace tog {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions that do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value, config field or record that violates its documented invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents. Carries the byte offset where parsing stopped.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// NaN/Inf encountered in a loss, gradient or weight update.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Fabrication and mislabeling need at least one benign detection.
class EmptyDetectionsError : public Error {
public:
    using Error::Error;
};

inline std::string dims_to_string(const std::vector<int>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

}  // namespace tog
