#include "patchlens/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "patchlens/errors.hpp"

namespace patchlens {

namespace {

spdlog::logger& logger() {
    static auto instance = [] {
        auto l = spdlog::stderr_logger_mt("patchlens");
        l->set_pattern("{\"ts\":\"%Y-%m-%dT%H:%M:%S.%eZ\",\"level\":\"%l\",%v", spdlog::pattern_time_type::utc);
        l->set_level(spdlog::level::info);
        return l;
    }();
    return *instance;
}

spdlog::level::level_enum to_spdlog(LogLevel level) {
    switch (level) {
        case LogLevel::debug: return spdlog::level::debug;
        case LogLevel::info: return spdlog::level::info;
        case LogLevel::warn: return spdlog::level::warn;
        case LogLevel::error: return spdlog::level::err;
    }
    return spdlog::level::info;
}

}  // namespace

void log_event(LogLevel level, const std::string& event, nlohmann::json fields) {
    auto& l = logger();
    if (!l.should_log(to_spdlog(level))) return;
    if (!fields.is_object()) fields = {{"value", std::move(fields)}};
    fields["event"] = event;
    // The pattern supplies the opening brace and the ts/level members.
    const std::string body = fields.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    l.log(to_spdlog(level), "{}", std::string_view(body).substr(1));
}

void set_log_level(LogLevel level) { logger().set_level(to_spdlog(level)); }

LogLevel parse_log_level(const std::string& s) {
    if (s == "debug") return LogLevel::debug;
    if (s == "info") return LogLevel::info;
    if (s == "warn" || s == "warning") return LogLevel::warn;
    if (s == "error") return LogLevel::error;
    throw InputError("unknown log level '" + s + "'");
}

}  // namespace patchlens
