#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchlens/attribution.hpp"
#include "patchlens/bundle.hpp"
#include "patchlens/mm_adapter.hpp"
#include "patchlens/projection.hpp"
#include "patchlens/trace.hpp"

namespace patchlens {

inline constexpr const char* kAnalyzeSchema = "analyze-response-v1";
inline constexpr const char* kProbeSchema = "probe-response-v1";
inline constexpr const char* kErrorSchema = "error-v1";

// Service settings. Precedence: defaults < config file < PATCHLENS_* environment.
struct ServiceConfig {
    std::string default_model = "toy";
    std::map<std::string, std::filesystem::path> models;  // id -> checkpoint directory
    std::filesystem::path heatmap_dir = "heatmaps";
    std::size_t session_capacity = 8;
    std::chrono::seconds session_ttl{600};
    std::size_t queue_capacity = 64;
    bool deterministic = false;
    CapturePrecision precision = CapturePrecision::f32;
    std::string device = "cpu";
    int max_new_tokens = 8;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::uint64_t seed = 0;
    std::filesystem::path prompts;  // optional template override

    static ServiceConfig from_json(const nlohmann::json& j);
    static ServiceConfig from_file(const std::filesystem::path& path);

    using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
    // PATCHLENS_MODEL, PATCHLENS_MODEL_PATH, PATCHLENS_DEVICE, PATCHLENS_HEATMAP_DIR,
    // PATCHLENS_SESSION_CAPACITY, PATCHLENS_SESSION_TTL_S, PATCHLENS_QUEUE_CAPACITY,
    // PATCHLENS_DETERMINISTIC, PATCHLENS_CAPTURE_PRECISION, PATCHLENS_HOST, PATCHLENS_PORT,
    // PATCHLENS_SEED.
    void apply_env(const EnvLookup& lookup);
    void apply_env();

    // Throws InputError on out-of-range values, CapabilityError for devices other than cpu.
    void validate() const;
    nlohmann::json to_json() const;
};

CapturePrecision parse_precision(const std::string& s);
std::string to_string(CapturePrecision p);

// Model id -> loaded bundle. Ids resolve, in order, to: bundles added with
// add(), configured checkpoint directories, "toy" / "toy:<seed>", or a path
// to a checkpoint directory. Loading happens once, on first use.
class ModelRegistry {
public:
    explicit ModelRegistry(ServiceConfig config) : config_(std::move(config)) {}

    void add(const std::string& id, std::shared_ptr<const ModelBundle> bundle);
    // Throws UnknownModel.
    std::shared_ptr<const ModelBundle> get(const std::string& id);
    std::vector<std::string> loaded() const;

private:
    ServiceConfig config_;
    mutable std::mutex mu_;
    std::map<std::string, std::shared_ptr<const ModelBundle>> bundles_;
};

// One analyzed input kept for follow-up probes.
struct Session {
    std::string id;
    std::shared_ptr<const ModelBundle> model;
    std::shared_ptr<const Trace> trace;
    PreparedInput input;
    AttributionResult attribution;
};

// Bounded LRU map of sessions with an idle timeout. Lookups of evicted or
// timed-out ids throw SessionExpired; ids never issued throw UnknownSession.
class SessionCache {
public:
    using Clock = std::function<std::chrono::steady_clock::time_point()>;

    explicit SessionCache(std::size_t capacity = 8, std::chrono::seconds ttl = std::chrono::seconds(600),
                          bool deterministic_ids = false, Clock clock = std::chrono::steady_clock::now);

    std::string new_id();
    void put(std::shared_ptr<const Session> session);
    std::shared_ptr<const Session> get(const std::string& id);

    std::size_t size() const;
    std::size_t capacity() const { return capacity_; }

private:
    struct Slot {
        std::shared_ptr<const Session> session;
        std::chrono::steady_clock::time_point touched;
        std::list<std::string>::iterator lru;
    };
    void expire_locked(std::string id);  // by value: callers pass references into order_
    void sweep_locked(std::chrono::steady_clock::time_point now);

    std::size_t capacity_;
    std::chrono::seconds ttl_;
    bool deterministic_ids_;
    Clock clock_;
    mutable std::mutex mu_;
    std::list<std::string> order_;  // front = most recent
    std::unordered_map<std::string, Slot> slots_;
    std::unordered_set<std::string> expired_;
    std::deque<std::string> expired_order_;
    std::uint64_t issued_ = 0;
    std::mt19937_64 rng_;
};

struct AnalyzeRequest {
    std::string model;                // empty = default model
    std::vector<std::uint8_t> image;  // empty = text mode
    std::string question;
    std::string context;              // text mode only, placed before the question
    std::optional<int> top_k;         // default: 10, or every head when the model has fewer
    std::string heads_policy = "top-k";
    std::optional<std::string> target_token;
    bool shared_scale = false;
    std::optional<int> max_new_tokens;

    // Image as base64 in "image_base64". Throws FieldError.
    static AnalyzeRequest from_json(const nlohmann::json& j);
};

struct AnalyzeResult {
    std::shared_ptr<const Session> session;
    int target = 0;
    std::vector<int> generated;  // greedy continuation, first entry = predicted token
    std::string answer;
    std::optional<PatchScoreMap> logprob_map;
    std::optional<PatchScoreMap> attention_map;
    bool shared_scale = false;
    std::map<std::string, std::string> heatmaps;  // kind -> file name in the heatmap dir
    std::uint64_t traced_passes = 0;
    std::uint64_t generation_passes = 0;
    std::map<std::string, double> timing_ms;
};

nlohmann::json to_json(const PatchScoreMap& map);
nlohmann::json token_json(const Tokenizer& tok, int id);
nlohmann::json projection_json(const TokenProjection& projection, const Tokenizer& tok, std::size_t k);
nlohmann::json analyze_response_json(const AnalyzeResult& result);
nlohmann::json error_json(const std::string& code, const std::string& message, const std::string& field = {});

// Maps an exception to an HTTP status and error code.
struct ErrorClass {
    int status;
    std::string code;
};
ErrorClass classify_error(const std::exception& e);

class Service {
public:
    explicit Service(ServiceConfig config);

    const ServiceConfig& config() const { return config_; }
    ModelRegistry& models() { return models_; }
    SessionCache& sessions() { return sessions_; }

    // prepare -> one traced pass -> attribution -> patch maps and heatmaps ->
    // greedy continuation (plain passes, counted separately).
    AnalyzeResult analyze(const AnalyzeRequest& request);
    nlohmann::json analyze_json(const AnalyzeRequest& request) { return analyze_response_json(analyze(request)); }

    // Answers from a cached trace without running the model. Kinds:
    //   project         position, layer (input of that layer; n_layers = final
    //                   residual) or head (+ position for one contribution), space, k
    //   head_positions  head, optional target
    //   patch_map       optional target, heads_policy, top_k
    //   attribution     optional target, top_k
    nlohmann::json probe(const nlohmann::json& request);

private:
    int resolve_target(const Session& session, const nlohmann::json& request) const;
    std::string write_heatmap(const std::string& session_id, const std::string& kind, const cv::Mat& image,
                              const PatchScoreMap* map) const;

    ServiceConfig config_;
    ModelRegistry models_;
    SessionCache sessions_;
};

}  // namespace patchlens
