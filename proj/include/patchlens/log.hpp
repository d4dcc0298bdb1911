#pragma once

#include <string>

#include <nlohmann/json.hpp>

namespace patchlens {

enum class LogLevel { debug, info, warn, error };

// One JSON object per line on stderr: {"ts", "level", "event", ...fields}.
void log_event(LogLevel level, const std::string& event, nlohmann::json fields = nlohmann::json::object());
void set_log_level(LogLevel level);
LogLevel parse_log_level(const std::string& s);

}  // namespace patchlens
