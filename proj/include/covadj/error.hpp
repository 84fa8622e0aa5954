#pragma once

#include <stdexcept>
#include <string>

namespace covadj {

// Base class for every error raised by the library. `kind()` is the
// machine-readable tag the CLI puts into its error JSON.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "error"; }
};

class SchemaError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "schema_error"; }
};

class ValidationError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "validation_error"; }
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, long row) : Error(what), row_(row) {}
    const char* kind() const noexcept override { return "parse_error"; }
    long row() const noexcept { return row_; }

private:
    long row_;
};

// IRLS or another iterative solver ran out of iterations.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double last_deviance)
        : Error(what), last_deviance_(last_deviance) {}
    const char* kind() const noexcept override { return "convergence_error"; }
    double last_deviance() const noexcept { return last_deviance_; }

private:
    double last_deviance_;
};

} // namespace covadj
