#pragma once

#include <stdexcept>
#include <string>

namespace gmi {

// Error taxonomy. Everything user-recoverable derives from Error so callers
// (CLI, pipeline) can map categories to exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct ParamError : Error {
    using Error::Error;
};
struct LoadError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct StageError : Error {
    using Error::Error;
};

namespace detail {
[[noreturn]] inline void fail_shape(const std::string& msg) { throw ShapeError(msg); }
[[noreturn]] inline void fail_param(const std::string& msg) { throw ParamError(msg); }
}  // namespace detail

#define GMI_CHECK(cond, msg)                                 \
    do {                                                     \
        if (!(cond)) throw ::gmi::Error(std::string(msg));   \
    } while (0)

#define GMI_CHECK_SHAPE(cond, msg)                           \
    do {                                                     \
        if (!(cond)) ::gmi::detail::fail_shape(msg);         \
    } while (0)

#define GMI_CHECK_PARAM(cond, msg)                           \
    do {                                                     \
        if (!(cond)) ::gmi::detail::fail_param(msg);         \
    } while (0)

}  // namespace gmi
