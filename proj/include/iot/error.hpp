#pragma once

#include <stdexcept>
#include <string>

namespace iot {

// Single exception type for all library-level failures. The message always
// starts with the operation or component that raised it.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) {
    throw Error(msg);
}

}  // namespace iot
