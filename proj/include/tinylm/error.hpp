#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tinylm {

enum class ErrorKind {
    config,
    dimension,
    sequence_length,
    io,
    data,
    numeric,
    usage,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Every failure raised by the library carries a kind so the CLI can print a
// stable single-line prefix.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace tinylm
