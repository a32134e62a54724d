#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace corestack::log {

enum class Level { info, warning };

using Sink = std::function<void(Level, std::string_view)>;

namespace detail {

inline std::mutex& sink_mutex() {
    static std::mutex m;
    return m;
}

inline Sink& sink() {
    static Sink s = [](Level level, std::string_view msg) {
        std::cerr << (level == Level::warning ? "[warn] " : "[info] ") << msg << '\n';
    };
    return s;
}

}  // namespace detail

/// Replaces the process-wide sink and returns the previous one.
inline Sink set_sink(Sink s) {
    std::lock_guard lock(detail::sink_mutex());
    return std::exchange(detail::sink(), std::move(s));
}

inline void emit(Level level, std::string_view msg) {
    std::lock_guard lock(detail::sink_mutex());
    if (detail::sink()) detail::sink()(level, msg);
}

inline void warn(std::string_view msg) { emit(Level::warning, msg); }
inline void info(std::string_view msg) { emit(Level::info, msg); }

/// Collects warnings for the lifetime of the object (tests use this).
class ScopedCapture {
public:
    ScopedCapture()
        : previous_(set_sink([this](Level level, std::string_view msg) {
              if (level == Level::warning) warnings_.emplace_back(msg);
          })) {}
    ~ScopedCapture() { set_sink(std::move(previous_)); }
    ScopedCapture(const ScopedCapture&) = delete;
    ScopedCapture& operator=(const ScopedCapture&) = delete;

    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    std::vector<std::string> warnings_;
    Sink previous_;
};

}  // namespace corestack::log
