#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <utility>

namespace preftok {

enum class LogLevel { kInfo, kWarning, kError };

using LogSink = std::function<void(LogLevel, const std::string&)>;

namespace detail {
inline LogSink& log_sink() {
  static LogSink sink = [](LogLevel level, const std::string& msg) {
    if (level == LogLevel::kInfo) return;
    std::cerr << (level == LogLevel::kWarning ? "warning: " : "error: ")
              << msg << '\n';
  };
  return sink;
}
}  // namespace detail

// Replaces the process-wide sink and returns the previous one.
inline LogSink set_log_sink(LogSink sink) {
  return std::exchange(detail::log_sink(), std::move(sink));
}

inline void log_message(LogLevel level, const std::string& msg) {
  if (detail::log_sink()) detail::log_sink()(level, msg);
}

inline void log_warning(const std::string& msg) {
  log_message(LogLevel::kWarning, msg);
}

// RAII capture of log output, for tests and for quiet CLI modes.
class ScopedLogCapture {
 public:
  ScopedLogCapture()
      : previous_(set_log_sink([this](LogLevel level, const std::string& m) {
          if (level == LogLevel::kWarning) ++warnings_;
          text_ += m;
          text_ += '\n';
        })) {}
  ~ScopedLogCapture() { set_log_sink(std::move(previous_)); }
  ScopedLogCapture(const ScopedLogCapture&) = delete;
  ScopedLogCapture& operator=(const ScopedLogCapture&) = delete;

  int warnings() const { return warnings_; }
  const std::string& text() const { return text_; }

 private:
  int warnings_ = 0;
  std::string text_;
  LogSink previous_;
};

}  // namespace preftok
