#include "patchlens/service.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include <openssl/evp.h>

#include "patchlens/checkpoint.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/hash.hpp"
#include "patchlens/projection.hpp"

namespace patchlens {

namespace {

using Ms = std::chrono::duration<double, std::milli>;

std::vector<std::uint8_t> decode_base64(const std::string& text) {
    std::string clean;
    clean.reserve(text.size());
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
    if (clean.size() % 4 != 0) throw FieldError("image_base64", "length is not a multiple of 4");
    std::vector<std::uint8_t> out(clean.size() / 4 * 3);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                  static_cast<int>(clean.size()));
    if (n < 0) throw FieldError("image_base64", "not valid base64");
    std::size_t pad = 0;
    for (auto it = clean.rbegin(); it != clean.rend() && *it == '='; ++it) ++pad;
    out.resize(static_cast<std::size_t>(n) - std::min<std::size_t>(pad, 2));
    return out;
}

template <class T>
T field(const nlohmann::json& j, const char* name, T fallback) {
    if (!j.contains(name) || j[name].is_null()) return fallback;
    try {
        return j[name].get<T>();
    } catch (const nlohmann::json::exception&) {
        throw FieldError(name, "has the wrong type");
    }
}

bool parse_bool(const std::string& s, const std::string& name) {
    std::string v = s;
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw InputError(name + ": expected a boolean, got '" + s + "'");
}

long long parse_int(const std::string& s, const std::string& name) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw InputError(name + ": expected an integer, got '" + s + "'");
}

int argmax_lowest(const Vector& logits) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<int>(best);
}

VectorD residual_d(const Trace& trace, int layer, int position) {
    const auto r = trace.residual(layer, position);
    VectorD d(static_cast<Eigen::Index>(r.size()));
    for (std::size_t i = 0; i < r.size(); ++i) d[static_cast<Eigen::Index>(i)] = r[i];
    return d;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(' ');
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(' ');
    return s.substr(b, e - b + 1);
}

}  // namespace

CapturePrecision parse_precision(const std::string& s) {
    if (s == "f32" || s == "float32" || s == "fp32") return CapturePrecision::f32;
    if (s == "f16" || s == "float16" || s == "fp16") return CapturePrecision::f16;
    throw InputError("unknown capture precision '" + s + "' (expected f32 or f16)");
}

std::string to_string(CapturePrecision p) { return p == CapturePrecision::f16 ? "f16" : "f32"; }

// --- configuration --------------------------------------------------------------

ServiceConfig ServiceConfig::from_json(const nlohmann::json& j) {
    ServiceConfig c;
    try {
        c.default_model = j.value("default_model", c.default_model);
        if (j.contains("models"))
            for (const auto& [id, path] : j["models"].items()) c.models[id] = path.get<std::string>();
        c.heatmap_dir = j.value("heatmap_dir", c.heatmap_dir.string());
        c.session_capacity = j.value("session_capacity", c.session_capacity);
        c.session_ttl = std::chrono::seconds(j.value("session_ttl_s", static_cast<long long>(c.session_ttl.count())));
        c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
        c.deterministic = j.value("deterministic", c.deterministic);
        c.precision = parse_precision(j.value("capture_precision", to_string(c.precision)));
        c.device = j.value("device", c.device);
        c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
        c.host = j.value("host", c.host);
        c.port = j.value("port", c.port);
        c.seed = j.value("seed", c.seed);
        c.prompts = j.value("prompts", c.prompts.string());
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("service config: ") + e.what());
    }
    c.validate();
    return c;
}

ServiceConfig ServiceConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open service config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("malformed service config " + path.string() + ": " + e.what());
    }
    auto c = from_json(j);
    // Relative paths in the file are relative to the file.
    const auto base = path.parent_path();
    const auto rebase = [&](std::filesystem::path& p) {
        if (!p.empty() && p.is_relative()) p = base / p;
    };
    rebase(c.heatmap_dir);
    rebase(c.prompts);
    for (auto& [id, p] : c.models) rebase(p);
    return c;
}

void ServiceConfig::apply_env(const EnvLookup& env) {
    if (auto v = env("PATCHLENS_MODEL")) default_model = *v;
    if (auto v = env("PATCHLENS_MODEL_PATH")) {
        models[default_model] = *v;
    }
    if (auto v = env("PATCHLENS_DEVICE")) device = *v;
    if (auto v = env("PATCHLENS_HEATMAP_DIR")) heatmap_dir = *v;
    if (auto v = env("PATCHLENS_SESSION_CAPACITY"))
        session_capacity = static_cast<std::size_t>(parse_int(*v, "PATCHLENS_SESSION_CAPACITY"));
    if (auto v = env("PATCHLENS_SESSION_TTL_S")) session_ttl = std::chrono::seconds(parse_int(*v, "PATCHLENS_SESSION_TTL_S"));
    if (auto v = env("PATCHLENS_QUEUE_CAPACITY"))
        queue_capacity = static_cast<std::size_t>(parse_int(*v, "PATCHLENS_QUEUE_CAPACITY"));
    if (auto v = env("PATCHLENS_DETERMINISTIC")) deterministic = parse_bool(*v, "PATCHLENS_DETERMINISTIC");
    if (auto v = env("PATCHLENS_CAPTURE_PRECISION")) precision = parse_precision(*v);
    if (auto v = env("PATCHLENS_HOST")) host = *v;
    if (auto v = env("PATCHLENS_PORT")) port = static_cast<int>(parse_int(*v, "PATCHLENS_PORT"));
    if (auto v = env("PATCHLENS_SEED")) seed = static_cast<std::uint64_t>(parse_int(*v, "PATCHLENS_SEED"));
    validate();
}

void ServiceConfig::apply_env() {
    apply_env([](const std::string& name) -> std::optional<std::string> {
        if (const char* v = std::getenv(name.c_str())) return std::string(v);
        return std::nullopt;
    });
}

void ServiceConfig::validate() const {
    if (session_capacity == 0) throw InputError("session capacity must be positive");
    if (session_ttl.count() <= 0) throw InputError("session TTL must be positive");
    if (queue_capacity == 0) throw InputError("queue capacity must be positive");
    if (max_new_tokens < 1) throw InputError("max_new_tokens must be at least 1");
    if (port < 0 || port > 65535) throw InputError("port out of range");
    if (device != "cpu") throw CapabilityError("device '" + device + "' is not available (cpu only)");
}

nlohmann::json ServiceConfig::to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [id, p] : models) m[id] = p.string();
    return {{"default_model", default_model},
            {"models", m},
            {"heatmap_dir", heatmap_dir.string()},
            {"session_capacity", session_capacity},
            {"session_ttl_s", session_ttl.count()},
            {"queue_capacity", queue_capacity},
            {"deterministic", deterministic},
            {"capture_precision", to_string(precision)},
            {"device", device},
            {"max_new_tokens", max_new_tokens},
            {"host", host},
            {"port", port},
            {"seed", seed},
            {"prompts", prompts.string()}};
}

// --- models ---------------------------------------------------------------------

void ModelRegistry::add(const std::string& id, std::shared_ptr<const ModelBundle> bundle) {
    std::lock_guard lock(mu_);
    bundles_[id] = std::move(bundle);
}

std::shared_ptr<const ModelBundle> ModelRegistry::get(const std::string& id_in) {
    const std::string id = id_in.empty() ? config_.default_model : id_in;
    std::lock_guard lock(mu_);
    if (auto it = bundles_.find(id); it != bundles_.end()) return it->second;

    std::shared_ptr<ModelBundle> b;
    if (auto it = config_.models.find(id); it != config_.models.end()) {
        if (!std::filesystem::is_regular_file(it->second / "config.json"))
            throw UnknownModel("model '" + id + "' points at " + it->second.string() + ", which has no checkpoint");
        b = std::make_shared<ModelBundle>(load_checkpoint_bundle(it->second, config_.queue_capacity));
        b->id = id;
    } else if (id == "toy" || id.rfind("toy:", 0) == 0) {
        std::uint64_t seed = config_.seed;
        if (id.size() > 4) seed = static_cast<std::uint64_t>(parse_int(id.substr(4), "model"));
        b = std::make_shared<ModelBundle>(toy_bundle(seed, config_.queue_capacity));
        b->id = id;
    } else if (std::filesystem::is_regular_file(std::filesystem::path(id) / "config.json")) {
        b = std::make_shared<ModelBundle>(load_checkpoint_bundle(id, config_.queue_capacity));
    } else {
        throw UnknownModel("unknown model '" + id + "'");
    }
    if (!config_.prompts.empty()) b->templates = PromptTemplates::from_json_file(config_.prompts);
    bundles_[id] = b;
    return b;
}

std::vector<std::string> ModelRegistry::loaded() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& [id, b] : bundles_) out.push_back(id);
    return out;
}

// --- sessions -------------------------------------------------------------------

SessionCache::SessionCache(std::size_t capacity, std::chrono::seconds ttl, bool deterministic_ids, Clock clock)
    : capacity_(capacity), ttl_(ttl), deterministic_ids_(deterministic_ids), clock_(std::move(clock)) {
    if (capacity_ == 0) throw InputError("session capacity must be positive");
    if (!deterministic_ids_) rng_.seed(std::random_device{}());
}

std::string SessionCache::new_id() {
    std::lock_guard lock(mu_);
    ++issued_;
    if (deterministic_ids_) {
        std::string n = std::to_string(issued_);
        return "s" + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n;
    }
    return "s" + hex64(rng_()).substr(0, 12);
}

void SessionCache::expire_locked(std::string id) {
    auto it = slots_.find(id);
    if (it == slots_.end()) return;
    order_.erase(it->second.lru);
    slots_.erase(it);
    expired_.insert(id);
    expired_order_.push_back(id);
    // Remember a bounded number of retired ids.
    constexpr std::size_t kRemembered = 4096;
    while (expired_order_.size() > kRemembered) {
        expired_.erase(expired_order_.front());
        expired_order_.pop_front();
    }
}

void SessionCache::sweep_locked(std::chrono::steady_clock::time_point now) {
    std::vector<std::string> stale;
    for (const auto& [id, slot] : slots_)
        if (now - slot.touched >= ttl_) stale.push_back(id);
    for (const auto& id : stale) expire_locked(id);
}

void SessionCache::put(std::shared_ptr<const Session> session) {
    if (!session || session->id.empty()) throw InputError("session without an id");
    std::lock_guard lock(mu_);
    const auto now = clock_();
    sweep_locked(now);
    if (auto it = slots_.find(session->id); it != slots_.end()) {
        order_.erase(it->second.lru);
        slots_.erase(it);
    }
    while (slots_.size() >= capacity_) expire_locked(order_.back());
    const std::string id = session->id;
    order_.push_front(id);
    expired_.erase(id);
    slots_[id] = Slot{std::move(session), now, order_.begin()};
}

std::shared_ptr<const Session> SessionCache::get(const std::string& id) {
    std::lock_guard lock(mu_);
    const auto now = clock_();
    sweep_locked(now);
    auto it = slots_.find(id);
    if (it == slots_.end()) {
        if (expired_.count(id)) throw SessionExpired("session '" + id + "' has expired; analyze again");
        throw UnknownSession("unknown session '" + id + "'");
    }
    it->second.touched = now;
    order_.splice(order_.begin(), order_, it->second.lru);
    return it->second.session;
}

std::size_t SessionCache::size() const {
    std::lock_guard lock(mu_);
    return slots_.size();
}

// --- requests and JSON ----------------------------------------------------------

AnalyzeRequest AnalyzeRequest::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InputError("request body must be a JSON object");
    AnalyzeRequest r;
    r.model = field<std::string>(j, "model", "");
    r.question = field<std::string>(j, "question", "");
    r.context = field<std::string>(j, "context", "");
    if (j.contains("image_base64") && !j["image_base64"].is_null())
        r.image = decode_base64(field<std::string>(j, "image_base64", ""));
    if (j.contains("top_k") && !j["top_k"].is_null()) r.top_k = field<int>(j, "top_k", 10);
    r.heads_policy = field<std::string>(j, "heads_policy", r.heads_policy);
    if (j.contains("target_token") && !j["target_token"].is_null())
        r.target_token = field<std::string>(j, "target_token", "");
    r.shared_scale = field<bool>(j, "shared_scale", false);
    if (j.contains("max_new_tokens") && !j["max_new_tokens"].is_null())
        r.max_new_tokens = field<int>(j, "max_new_tokens", 1);
    return r;
}

nlohmann::json to_json(const PatchScoreMap& map) {
    const auto best = map.argmax();
    std::vector<double> display;
    display.reserve(map.scores.size());
    for (int r = 0; r < map.rows; ++r)
        for (int c = 0; c < map.cols; ++c) display.push_back(map.display(r, c));
    return {{"rows", map.rows},     {"cols", map.cols}, {"scores", map.scores},
            {"display", display},   {"min", map.min},   {"max", map.max},
            {"argmax", {{"row", best.row}, {"col", best.col}}}};
}

nlohmann::json token_json(const Tokenizer& tok, int id) {
    return {{"id", id}, {"piece", tok.piece(id)}, {"text", tok.decode(id)}};
}

nlohmann::json projection_json(const TokenProjection& projection, const Tokenizer& tok, std::size_t k) {
    nlohmann::json top = nlohmann::json::array();
    int rank = 1;
    for (const auto& t : projection.top(k)) {
        auto e = token_json(tok, t.id);
        e["rank"] = rank++;
        e["logit"] = t.logit;
        e["probability"] = t.probability;
        top.push_back(std::move(e));
    }
    return {{"space", to_string(projection.space())}, {"provenance", projection.provenance()}, {"top", top}};
}

nlohmann::json analyze_response_json(const AnalyzeResult& r) {
    const auto& s = *r.session;
    const auto& tok = *s.model->tokenizer;
    const auto& pm = s.input.positions;

    nlohmann::json heads = nlohmann::json::array();
    for (const auto& h : s.attribution.top_heads)
        heads.push_back({{"label", h.label()},
                         {"layer", h.layer},
                         {"head", h.head},
                         {"score", s.attribution.scores(h.layer, h.head)},
                         {"share", s.attribution.share(h)}});

    nlohmann::json maps = nullptr;
    if (r.logprob_map && r.attention_map)
        maps = {{"logprob", to_json(*r.logprob_map)}, {"avg_attention", to_json(*r.attention_map)}};

    nlohmann::json heatmaps = nlohmann::json::object();
    for (const auto& [kind, file] : r.heatmaps) heatmaps[kind] = {{"file", file}, {"url", "/heatmaps/" + file}};

    nlohmann::json visual = nullptr;
    if (pm.has_visual())
        visual = {{"begin", pm.visual().begin}, {"end", pm.visual().end}, {"rows", pm.rows()}, {"cols", pm.cols()}};

    nlohmann::json generated = nlohmann::json::array();
    for (int id : r.generated) generated.push_back(token_json(tok, id));

    return {{"schema", kAnalyzeSchema},
            {"session_id", s.id},
            {"model", s.model->id},
            {"mode", pm.has_visual() ? "image" : "text"},
            {"prompt", s.input.text},
            {"answer", r.answer},
            {"predicted_token", token_json(tok, s.trace->predicted_token())},
            {"generated_tokens", generated},
            {"target", token_json(tok, r.target)},
            {"top_heads", heads},
            {"scale", r.shared_scale ? "shared" : "per-map"},
            {"maps", maps},
            {"heatmaps", heatmaps},
            {"sequence", {{"length", pm.length()}, {"visual", visual}}},
            {"forward_passes", {{"traced", r.traced_passes}, {"generation", r.generation_passes}}},
            {"timing_ms", r.timing_ms}};
}

nlohmann::json error_json(const std::string& code, const std::string& message, const std::string& field) {
    nlohmann::json e = {{"code", code}, {"message", message}};
    if (!field.empty()) e["field"] = field;
    return {{"schema", kErrorSchema}, {"error", e}};
}

ErrorClass classify_error(const std::exception& e) {
    if (dynamic_cast<const ImageDecodeError*>(&e)) return {422, "image_decode"};
    if (dynamic_cast<const UnknownSession*>(&e)) return {404, "unknown_session"};
    if (dynamic_cast<const FieldError*>(&e)) return {400, "invalid_field"};
    if (dynamic_cast<const InputError*>(&e)) return {400, "invalid_input"};
    if (dynamic_cast<const IndexError*>(&e)) return {400, "out_of_range"};
    if (dynamic_cast<const SessionExpired*>(&e)) return {410, "session_expired"};
    if (dynamic_cast<const UnknownModel*>(&e)) return {404, "unknown_model"};
    if (dynamic_cast<const CapabilityError*>(&e)) return {422, "capability"};
    if (dynamic_cast<const QueueSaturated*>(&e)) return {503, "queue_saturated"};
    return {500, "internal"};
}

// --- service --------------------------------------------------------------------

Service::Service(ServiceConfig config)
    : config_(std::move(config)),
      models_(config_),
      sessions_(config_.session_capacity, config_.session_ttl, config_.deterministic) {
    config_.validate();
}

std::string Service::write_heatmap(const std::string& session_id, const std::string& kind, const cv::Mat& image,
                                   const PatchScoreMap* map) const {
    std::filesystem::create_directories(config_.heatmap_dir);
    const std::string file = session_id + "_" + kind + ".png";
    if (map)
        write_png(render_heatmap(image, *map, kind).composite, config_.heatmap_dir / file);
    else
        write_png(image, config_.heatmap_dir / file);
    return file;
}

AnalyzeResult Service::analyze(const AnalyzeRequest& req) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    AnalyzeResult r;

    if (req.question.empty()) throw FieldError("question", "is required");
    if (!req.image.empty() && !req.context.empty())
        throw FieldError("context", "give either an image or a text context, not both");
    auto bundle = models_.get(req.model);
    const auto& model = *bundle->model;
    const auto& cfg = model.config();
    const int n_heads_total = cfg.n_layers * cfg.n_heads;
    const int top_k = req.top_k.value_or(std::min(10, n_heads_total));
    if (top_k < 1 || top_k > n_heads_total)
        throw FieldError("top_k", "must be between 1 and " + std::to_string(n_heads_total));
    HeadSelection selection;
    try {
        selection = HeadSelection::parse(req.heads_policy, top_k);
    } catch (const std::exception& e) {
        throw FieldError("heads_policy", e.what());
    }
    const int max_new = req.max_new_tokens.value_or(config_.max_new_tokens);
    if (max_new < 1 || max_new > 256) throw FieldError("max_new_tokens", "must be between 1 and 256");

    auto session = std::make_shared<Session>();
    session->model = bundle;
    const auto& tok = *bundle->tokenizer;
    if (!req.image.empty()) {
        if (!bundle->encoder) throw CapabilityError("model '" + bundle->id + "' has no vision front end");
        session->input = prepare_vqa_input(req.image, req.question, cfg, tok, *bundle->encoder, bundle->templates);
    } else {
        session->input = prepare_text_input(req.context, req.question, cfg, tok, bundle->templates);
    }
    const auto t_prepare = clock::now();

    TraceOptions opts;
    opts.precision = config_.precision;
    session->trace = run_traced(model, session->input.model_input(), session->input.positions, opts);
    r.traced_passes = 1;
    const auto t_trace = clock::now();

    r.target = session->trace->predicted_token();
    if (req.target_token) {
        try {
            r.target = make_token_target(tok, *req.target_token).ids.front();
        } catch (const InputError& e) {
            throw FieldError("target_token", e.what());
        }
    }
    session->attribution = attribute(*session->trace, r.target, top_k);
    const auto t_attr = clock::now();

    session->id = sessions_.new_id();
    if (session->input.positions.has_visual()) {
        r.logprob_map = patch_score_map(*session->trace, r.target, selection);
        r.attention_map = average_attention_map(*session->trace);
        if (req.shared_scale) share_scale(*r.logprob_map, *r.attention_map);
        r.shared_scale = req.shared_scale;
        r.heatmaps["image"] = write_heatmap(session->id, "image", session->input.image, nullptr);
        r.heatmaps["logprob"] = write_heatmap(session->id, "logprob", session->input.image, &*r.logprob_map);
        r.heatmaps["avg_attention"] =
            write_heatmap(session->id, "avg_attention", session->input.image, &*r.attention_map);
    }
    const auto t_maps = clock::now();

    // Greedy continuation. The first token comes from the traced pass.
    std::vector<int> tokens = session->input.tokens;
    const Matrix* visual = session->input.visual ? &*session->input.visual : nullptr;
    const int visual_begin = session->input.positions.visual().begin;
    int next = session->trace->predicted_token();
    while (true) {
        r.generated.push_back(next);
        if (tok.eos_id() && next == *tok.eos_id()) break;
        if (static_cast<int>(r.generated.size()) >= max_new) break;
        tokens.push_back(next);
        if (static_cast<int>(tokens.size()) >= cfg.max_positions) break;
        next = argmax_lowest(model.next_token_logits(tokens, visual, visual_begin));
        ++r.generation_passes;
    }
    std::vector<int> shown = r.generated;
    if (tok.eos_id() && !shown.empty() && shown.back() == *tok.eos_id()) shown.pop_back();
    r.answer = trim(tok.decode(shown));
    const auto t_gen = clock::now();

    r.session = session;
    sessions_.put(session);
    r.timing_ms = {{"prepare", Ms(t_prepare - t0).count()},
                   {"trace", Ms(t_trace - t_prepare).count()},
                   {"attribution", Ms(t_attr - t_trace).count()},
                   {"heatmaps", Ms(t_maps - t_attr).count()},
                   {"generation", Ms(t_gen - t_maps).count()},
                   {"total", Ms(t_gen - t0).count()}};
    return r;
}

int Service::resolve_target(const Session& s, const nlohmann::json& req) const {
    const auto& tok = *s.model->tokenizer;
    if (req.contains("target_id") && !req["target_id"].is_null()) {
        const int id = field<int>(req, "target_id", 0);
        if (id < 0 || id >= s.trace->weights().config.vocab_size)
            throw IndexError("target_id " + std::to_string(id) + " is outside the vocabulary");
        return id;
    }
    if (req.contains("target_token") && !req["target_token"].is_null()) {
        try {
            return make_token_target(tok, field<std::string>(req, "target_token", "")).ids.front();
        } catch (const FieldError&) {
            throw;
        } catch (const InputError& e) {
            throw FieldError("target_token", e.what());
        }
    }
    return s.attribution.target;
}

nlohmann::json Service::probe(const nlohmann::json& req) {
    if (!req.is_object()) throw InputError("request body must be a JSON object");
    const auto id = field<std::string>(req, "session_id", "");
    if (id.empty()) throw FieldError("session_id", "is required");
    const auto kind = field<std::string>(req, "probe", "");
    if (kind.empty()) throw FieldError("probe", "is required");
    const auto session = sessions_.get(id);
    const auto& s = *session;
    const auto& trace = *s.trace;
    const auto& tok = *s.model->tokenizer;
    const auto& w = trace.weights();

    const auto head_field = [&]() {
        const auto label = field<std::string>(req, "head", "");
        if (label.empty()) throw FieldError("head", "is required");
        HeadId h;
        try {
            h = HeadId::parse(label);
        } catch (const InputError& e) {
            throw FieldError("head", e.what());
        }
        trace.check_head(h);
        return h;
    };

    nlohmann::json out = {{"schema", kProbeSchema}, {"session_id", s.id}, {"probe", kind}};
    if (kind == "project") {
        const auto space = parse_space(field<std::string>(req, "space", "unembedding"));
        const int k = field<int>(req, "k", 20);
        if (k < 1) throw FieldError("k", "must be positive");
        VectorD v;
        std::string provenance;
        const bool has_pos = req.contains("position") && !req["position"].is_null();
        const int position = field<int>(req, "position", trace.length() - 1);
        trace.check_position(position);
        if (req.contains("head") && !req["head"].is_null()) {
            const auto h = head_field();
            if (has_pos) {
                v = position_contribution(trace, h, position);
                provenance = "contribution of position " + std::to_string(position) + " to head " + h.label();
            } else {
                v = head_output(trace, h);
                provenance = "output of head " + h.label();
            }
        } else {
            const int layer = field<int>(req, "layer", 0);
            if (layer < 0 || layer > trace.n_layers())
                throw IndexError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(trace.n_layers()) + "]");
            v = residual_d(trace, layer - 1, position);
            provenance = "input of layer " + std::to_string(layer) + " at position " + std::to_string(position);
        }
        const auto projection = project(w, v, space, provenance);
        out["position"] = position;
        out["projection"] = projection_json(projection, tok, static_cast<std::size_t>(k));
    } else if (kind == "head_positions") {
        const auto h = head_field();
        const int target = resolve_target(s, req);
        std::vector<double> scores(static_cast<std::size_t>(trace.length()));
        for (int p = 0; p < trace.length(); ++p)
            scores[static_cast<std::size_t>(p)] = position_log_prob_increase(trace, h, target, p);
        const auto att = trace.attention(h);
        out["head"] = h.label();
        out["target"] = token_json(tok, target);
        out["scores"] = scores;
        out["attention"] = std::vector<double>(att.begin(), att.end());
        const auto& pm = trace.positions();
        if (pm.has_visual()) {
            PatchScoreMap m;
            m.rows = pm.rows();
            m.cols = pm.cols();
            for (int p = pm.visual().begin; p < pm.visual().end; ++p) m.scores.push_back(scores[static_cast<std::size_t>(p)]);
            const auto [lo, hi] = std::minmax_element(m.scores.begin(), m.scores.end());
            m.min = *lo;
            m.max = *hi;
            out["visual"] = to_json(m);
        } else {
            out["visual"] = nullptr;
        }
    } else if (kind == "patch_map") {
        if (!trace.positions().has_visual()) throw CapabilityError("session has no image");
        const int target = resolve_target(s, req);
        const int top_k = field<int>(req, "top_k", static_cast<int>(s.attribution.top_heads.size()));
        HeadSelection sel;
        try {
            sel = HeadSelection::parse(field<std::string>(req, "heads_policy", "top-k"), top_k);
        } catch (const std::exception& e) {
            throw FieldError("heads_policy", e.what());
        }
        if (top_k < 1 || top_k > trace.n_layers() * trace.n_heads()) throw FieldError("top_k", "out of range");
        const auto map = patch_score_map(trace, target, sel);
        const auto policy_key = field<std::string>(req, "heads_policy", "top-k") + "/" + std::to_string(top_k);
        const std::string tag = "probe_" + std::to_string(target) + "_" + hex64(fnv1a64(policy_key)).substr(0, 8);
        const auto file = write_heatmap(s.id, tag, s.input.image, &map);
        out["target"] = token_json(tok, target);
        out["map"] = to_json(map);
        out["heatmap"] = {{"file", file}, {"url", "/heatmaps/" + file}};
    } else if (kind == "attribution") {
        const int target = resolve_target(s, req);
        const int top_k = field<int>(req, "top_k", 10);
        if (top_k < 1 || top_k > trace.n_layers() * trace.n_heads()) throw FieldError("top_k", "out of range");
        const auto a = attribute(trace, target, top_k);
        nlohmann::json heads = nlohmann::json::array();
        for (const auto& h : a.top_heads)
            heads.push_back({{"label", h.label()}, {"layer", h.layer}, {"head", h.head},
                             {"score", a.scores(h.layer, h.head)}, {"share", a.share(h)}});
        out["target"] = token_json(tok, target);
        out["top_heads"] = heads;
    } else {
        throw FieldError("probe", "unknown probe '" + kind + "' (project, head_positions, patch_map, attribution)");
    }
    out["forward_passes"] = {{"traced", 0}, {"generation", 0}};
    return out;
}

}  // namespace patchlens
