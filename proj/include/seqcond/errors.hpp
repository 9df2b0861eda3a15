#pragma once

#include <stdexcept>
#include <string>

namespace seqcond {

// Exception categories map one-to-one onto CLI exit codes (see status_of).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed configuration, shape mismatch, out-of-range argument.
class InputError : public Error {
public:
    using Error::Error;
};

// Non-finite values, imaginary residuals, violated positivity.
class NumericalError : public Error {
public:
    using Error::Error;
};

// A verification check ran to completion and did not hold.
class CheckFailure : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

enum class Status : int {
    kOk = 0,
    kCheckFailed = 1,
    kInputError = 2,
    kNumericalAbort = 3,
    kIoError = 4,
    kInternal = 5,
};

}  // namespace seqcond
