#pragma once

#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>

namespace dpi {

enum class ErrorCode {
    config,
    dimension,
    numeric,
    io,
    format_truncated,
    format_version,
    format_hash,
    format_magic,
    format_parse,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::config: return "config";
        case ErrorCode::dimension: return "dimension";
        case ErrorCode::numeric: return "numeric";
        case ErrorCode::io: return "io";
        case ErrorCode::format_truncated: return "format_truncated";
        case ErrorCode::format_version: return "format_version";
        case ErrorCode::format_hash: return "format_hash";
        case ErrorCode::format_magic: return "format_magic";
        case ErrorCode::format_parse: return "format_parse";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorCode::config, what) {}
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& what) : Error(ErrorCode::dimension, what) {}
};

/// Non-finite values in a forward pass, gradient, or update. `coordinate` is the
/// offending flat index when one is known, otherwise -1.
struct NumericError : Error {
    NumericError(const std::string& what, long long coordinate = -1)
        : Error(ErrorCode::numeric, what), coordinate(coordinate) {}
    long long coordinate;
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorCode::io, what) {}
};

struct FormatError : Error {
    FormatError(ErrorCode code, const std::string& what) : Error(code, what) {}
};

// Warnings go through a process-wide sink so tests and the CLI can capture them.
using WarningSink = std::function<void(const std::string&)>;

namespace detail {
struct WarningState {
    std::mutex mutex;
    WarningSink sink;
};

inline WarningState& warning_state() {
    static WarningState state;
    return state;
}
}  // namespace detail

/// Installs a new sink and returns the previous one. An empty sink discards warnings.
inline WarningSink set_warning_sink(WarningSink sink) {
    auto& state = detail::warning_state();
    std::lock_guard lock(state.mutex);
    std::swap(state.sink, sink);
    return sink;
}

inline void warn(const std::string& message) {
    auto& state = detail::warning_state();
    std::lock_guard lock(state.mutex);
    if (state.sink) state.sink(message);
}

}  // namespace dpi
