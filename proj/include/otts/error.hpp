#ifndef OTTS_ERROR_HPP
#define OTTS_ERROR_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace otts {

enum class ErrorCode {
    invalid_input,
    parse_error,
    version_mismatch,
    io_error,
};

inline const char* to_string(ErrorCode code)
{
    switch (code) {
    case ErrorCode::invalid_input: return "invalid_input";
    case ErrorCode::parse_error: return "parse_error";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::io_error: return "io_error";
    }
    return "unknown";
}

// Every library failure surfaces as this type; the CLI prints code() + what()
// on a single line.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

class ParseError : public Error {
public:
    ParseError(std::uint64_t byte_offset, const std::string& message)
        : Error(ErrorCode::parse_error,
                message + " (at byte " + std::to_string(byte_offset) + ")"),
          byte_offset_(byte_offset) {}

    std::uint64_t byte_offset() const noexcept { return byte_offset_; }

private:
    std::uint64_t byte_offset_;
};

[[noreturn]] inline void invalid_input(const std::string& message)
{
    throw Error(ErrorCode::invalid_input, message);
}

inline void require(bool condition, const std::string& message)
{
    if (!condition) invalid_input(message);
}

} // namespace otts

#endif // OTTS_ERROR_HPP
