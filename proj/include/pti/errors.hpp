#pragma once

#include <stdexcept>
#include <string>

namespace pti {

// Typed errors so the CLI can map each failure class to a distinct exit code.

struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct fingerprint_error : std::runtime_error {
    explicit fingerprint_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct overwrite_error : std::runtime_error {
    explicit overwrite_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace pti
