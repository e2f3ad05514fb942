#pragma once

#include <stdexcept>
#include <string>

namespace dawn {

// Error taxonomy mapped to CLI exit codes: invalid_argument -> 2,
// io_error -> 3, numeric_error -> 4.
struct invalid_argument : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw invalid_argument(msg);
}

}  // namespace dawn
