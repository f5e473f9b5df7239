#pragma once

#include <string_view>

namespace dsem {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, quiet = 4 };

void set_log_level(LogLevel level);
LogLevel log_level();

// Single-line messages to stderr, prefixed with the level.
void log_info(std::string_view msg);
void log_warn(std::string_view msg);

}  // namespace dsem
