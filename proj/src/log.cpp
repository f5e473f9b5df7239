#include "dsem/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace dsem {

namespace {
std::atomic<LogLevel> g_level{LogLevel::info};
std::mutex g_mutex;

void emit(LogLevel level, const char* tag, std::string_view msg) {
  if (level < g_level.load()) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::clog << "[" << tag << "] " << msg << "\n";
}
}  // namespace

void set_log_level(LogLevel level) { g_level.store(level); }
LogLevel log_level() { return g_level.load(); }

void log_info(std::string_view msg) { emit(LogLevel::info, "info", msg); }
void log_warn(std::string_view msg) { emit(LogLevel::warn, "warn", msg); }

}  // namespace dsem
