#pragma once

#include <stdexcept>
#include <string>

namespace glmmreml {

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SingularSystemError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class BoundaryError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class InnerModeError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ProfileError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class UnsupportedError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class AlignmentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace glmmreml
