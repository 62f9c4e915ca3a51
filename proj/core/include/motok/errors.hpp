#pragma once

#include <stdexcept>
#include <string>

namespace motok {

// Exit-code contract: 0 ok, 1 usage, 2 validation/config, 3 numeric/internal.
struct Error : std::runtime_error {
    Error(std::string kind, const std::string& msg, int exit_code)
        : std::runtime_error(msg), kind_(std::move(kind)), exit_code_(exit_code) {}
    const std::string& kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return exit_code_; }

  private:
    std::string kind_;
    int exit_code_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error("dimension", msg, 2) {}
};
struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error("validation", msg, 2) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config", msg, 2) {}
};
struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error("index", msg, 2) {}
};
struct StateError : Error {
    explicit StateError(const std::string& msg) : Error("state", msg, 2) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io", msg, 2) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric", msg, 3) {}
};
// Broken internal precondition (caller bug, not user input).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error("contract", msg, 3) {}
};

} // namespace motok
