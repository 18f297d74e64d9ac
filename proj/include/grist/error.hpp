#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace grist {

/// Error type thrown by every module in this library.
class Error : public std::runtime_error {
public:
    explicit Error(std::string msg) : std::runtime_error(std::move(msg)) {}
};

namespace detail {
inline void append_all(std::ostringstream&) {}

template <typename T, typename... Rest>
void append_all(std::ostringstream& os, T&& value, Rest&&... rest) {
    os << std::forward<T>(value);
    append_all(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Parts>
[[noreturn]] void fail(Parts&&... parts) {
    std::ostringstream os;
    detail::append_all(os, std::forward<Parts>(parts)...);
    throw Error(os.str());
}

template <typename... Parts>
void require(bool condition, Parts&&... parts) {
    if (!condition) {
        fail(std::forward<Parts>(parts)...);
    }
}

}  // namespace grist
