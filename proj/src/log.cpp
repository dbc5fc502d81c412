#include "minibert/log.hpp"

#include <cstdio>
#include <mutex>
#include <string>

namespace minibert {
namespace {

std::mutex g_sink_mutex;
LogSink g_sink;

}  // namespace

void SetLogSink(LogSink sink) {
  std::lock_guard<std::mutex> lock(g_sink_mutex);
  g_sink = std::move(sink);
}

void Log(LogLevel level, std::string_view message) {
  std::lock_guard<std::mutex> lock(g_sink_mutex);
  if (g_sink) {
    g_sink(level, message);
    return;
  }
  const char* tag = level == LogLevel::kWarning ? "warning" : "info";
  std::fprintf(stderr, "[minibert %s] %.*s\n", tag,
               static_cast<int>(message.size()), message.data());
}

}  // namespace minibert
