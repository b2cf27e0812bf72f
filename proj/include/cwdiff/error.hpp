#pragma once

#include <stdexcept>
#include <string>

namespace cwdiff {

// Each category maps to a distinct CLI exit code.
enum class ErrorKind {
    invalid_argument = 2,
    shape = 3,
    schema = 4,
    io = 5,
    checksum = 6,
    numeric = 7,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) {
        throw Error(kind, what);
    }
}

const char* to_string(ErrorKind kind) noexcept;

}  // namespace cwdiff
