#pragma once

#include <stdexcept>
#include <string>

namespace msae {

// Maps onto CLI exit codes: usage 1, data 2, numeric 3.
enum class ErrorKind { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& what) : Error(ErrorKind::usage, what) {}
};

// Unknown sample id, neuron index or similar lookup failure.
class NotFound : public Error {
public:
    explicit NotFound(const std::string& what) : Error(ErrorKind::usage, what) {}
};

class DimensionMismatch : public Error {
public:
    explicit DimensionMismatch(const std::string& what) : Error(ErrorKind::data, what) {}
};

class FormatError : public Error {
public:
    enum class Code {
        io,
        bad_magic,
        bad_version,
        truncated,
        length_mismatch,
        non_finite,
        bad_header,
        validation,
    };

    FormatError(Code code, const std::string& what) : Error(ErrorKind::data, what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

// Zero scale, zero HSIC and similar undefined quantities.
class DegenerateError : public NumericError {
public:
    explicit DegenerateError(const std::string& what) : NumericError(what) {}
};

} // namespace msae
