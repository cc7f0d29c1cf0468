#pragma once

#include <stdexcept>
#include <string>

namespace relkd {

// Base of every error the library raises. The CLI maps ConfigError (and its
// subclasses) to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Softmax row whose mask leaves no admissible position.
class DegenerateRowError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class VocabError : public Error {
public:
    using Error::Error;
};

class IngestionError : public Error {
public:
    using Error::Error;
};

class EmptyBatchError : public Error {
public:
    using Error::Error;
};

class NonFiniteGradientError : public Error {
public:
    NonFiniteGradientError(std::string param, const std::string& what)
        : Error(what), param_(std::move(param)) {}
    const std::string& param() const noexcept { return param_; }

private:
    std::string param_;
};

class IntegrityError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class LoadError : public Error {
public:
    using Error::Error;
};

class EvaluationError : public Error {
public:
    using Error::Error;
};

} // namespace relkd
