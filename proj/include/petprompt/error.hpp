#pragma once

#include <stdexcept>
#include <string>

namespace petprompt {

// Every failure surfaced to callers carries a short machine-readable code
// ("io", "shape", "config", "not_found", ...) next to the human message.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

inline void require(bool condition, const char* code, const std::string& message) {
    if (!condition) {
        throw Error(code, message);
    }
}

} // namespace petprompt
