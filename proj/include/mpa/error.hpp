#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mpa {

/// Base of every error raised by the library. The CLI maps subclasses onto
/// exit codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InputShapeError : public Error {
public:
    using Error::Error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class ParameterError : public Error {
public:
    using Error::Error;
};

class SingularLayerError : public Error {
public:
    using Error::Error;
};

class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class UnsupportedArchitectureError : public Error {
public:
    using Error::Error;
};

/// Requested margin lies outside the range certified by an assumption check.
class ContractError : public Error {
public:
    ContractError(const std::string& what, double gamma_bar)
        : Error(what), gamma_bar_(gamma_bar) {}
    double gamma_bar() const noexcept { return gamma_bar_; }

private:
    double gamma_bar_;
};

class TrainingDivergedError : public Error {
public:
    explicit TrainingDivergedError(std::size_t epoch, const std::string& context = {})
        : Error((context.empty() ? "" : context + ": ") + "training diverged (non-finite loss) at epoch " +
                std::to_string(epoch)),
          epoch_(epoch) {}
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

/// Malformed tabular input; `line` is 1-based.
class CsvError : public Error {
public:
    CsvError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace mpa
