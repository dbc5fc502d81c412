#pragma once

#include <functional>
#include <string_view>

namespace minibert {

enum class LogLevel { kInfo, kWarning };

using LogSink = std::function<void(LogLevel, std::string_view)>;

// Replaces the process-wide sink. Passing an empty function restores the
// default, which writes to standard error.
void SetLogSink(LogSink sink);

void Log(LogLevel level, std::string_view message);

}  // namespace minibert
