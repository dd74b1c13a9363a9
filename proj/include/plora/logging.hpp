#pragma once

#include <cstdlib>
#include <iostream>
#include <string>

namespace plora {

enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

// Reads PLORA_LOG_LEVEL (quiet|info|debug) once; defaults to info.
inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("PLORA_LOG_LEVEL");
        if (!env) return LogLevel::kInfo;
        const std::string s(env);
        if (s == "quiet") return LogLevel::kQuiet;
        if (s == "debug") return LogLevel::kDebug;
        return LogLevel::kInfo;
    }();
    return level;
}

inline void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::kInfo) std::cerr << "[plora] " << msg << "\n";
}

inline void log_debug(const std::string& msg) {
    if (log_level() >= LogLevel::kDebug) std::cerr << "[plora:debug] " << msg << "\n";
}

}  // namespace plora
