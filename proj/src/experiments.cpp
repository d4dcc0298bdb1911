#include "patchlens/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "patchlens/errors.hpp"
#include "patchlens/hash.hpp"
#include "patchlens/projection.hpp"

namespace patchlens {

// --- annotations ----------------------------------------------------------------

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    const char sep = line.find('\t') != std::string::npos ? '\t' : ' ';
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, sep)) {
        f = trim(f);
        if (!f.empty()) out.push_back(f);
    }
    return out;
}

std::string resolve(const std::string& p, const std::filesystem::path& base) {
    if (p.empty() || base.empty() || std::filesystem::path(p).is_absolute()) return p;
    return (base / p).lexically_normal().string();
}

}  // namespace

IngestResult ingest_annotations(std::istream& in, const std::filesystem::path& base_dir) {
    IngestResult r;
    std::set<std::pair<std::string, std::string>> seen;
    std::string line;
    int n = 0;
    int records = 0;
    while (std::getline(in, line)) {
        ++n;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        ++records;
        CaseAnnotation c;
        c.line = n;
        std::string error;
        for (const auto& field : split_fields(t)) {
            const auto eq = field.find('=');
            if (eq == std::string::npos || eq == 0) {
                error = "field '" + field + "' is not key=value";
                break;
            }
            const std::string key = field.substr(0, eq);
            const std::string value = field.substr(eq + 1);
            if (key == "image") c.image = resolve(value, base_dir);
            else if (key == "animal") c.animal = value;
            else if (key == "color") c.color = value;
            else if (key == "distractor") c.distractor = value;
            else if (key == "split") c.split = value;
            else if (key == "mask") c.mask = resolve(value, base_dir);
            else {
                error = "unknown field '" + key + "'";
                break;
            }
        }
        if (error.empty()) {
            std::vector<std::string> missing;
            if (c.animal.empty()) missing.push_back("animal");
            if (c.color.empty()) missing.push_back("color");
            if (c.distractor.empty()) missing.push_back("distractor");
            if (!missing.empty()) {
                error = "missing field";
                if (missing.size() > 1) error += "s";
                for (std::size_t i = 0; i < missing.size(); ++i) error += (i ? ", " : " ") + missing[i];
            } else if (c.animal == c.distractor) {
                error = "animal and distractor are both '" + c.animal + "'";
            }
        }
        if (!error.empty()) {
            r.errors.push_back({n, error});
            continue;
        }
        if (!seen.insert({c.image, c.animal}).second) {
            ++r.duplicates;
            continue;
        }
        r.cases.push_back(std::move(c));
    }
    if (records == 0) r.warnings.push_back("annotation file has no records");
    if (r.duplicates > 0) r.warnings.push_back(std::to_string(r.duplicates) + " duplicate (image, animal) records dropped");
    return r;
}

IngestResult ingest_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open annotation file " + path.string());
    return ingest_annotations(in, path.parent_path());
}

// --- report -----------------------------------------------------------------------

std::string to_string(StatKind kind) {
    switch (kind) {
        case StatKind::proportion: return "proportion";
        case StatKind::mrr: return "mrr";
        case StatKind::logit: return "logit";
        case StatKind::attention: return "attention";
        case StatKind::count: return "count";
    }
    return "count";
}

namespace {

StatKind parse_kind(const std::string& s) {
    for (auto k : {StatKind::proportion, StatKind::mrr, StatKind::logit, StatKind::attention, StatKind::count})
        if (to_string(k) == s) return k;
    throw InputError("unknown statistic kind '" + s + "'");
}

void check_range(const Statistic& s) {
    constexpr double slack = 1e-6;
    if (!std::isfinite(s.value)) throw InputError("statistic " + s.name + " is not finite");
    bool ok = true;
    switch (s.kind) {
        case StatKind::proportion: ok = s.value >= -slack && s.value <= 100.0 + slack; break;
        case StatKind::mrr: ok = s.value > 0.0 && s.value <= 1.0 + slack; break;
        case StatKind::attention: ok = s.value >= -slack && s.value <= 1.0 + slack; break;
        default: break;
    }
    if (!ok) throw InputError("statistic " + s.name + " = " + std::to_string(s.value) + " is outside the range of a " + to_string(s.kind));
}

nlohmann::json grid_json(const HeadGrid& g) {
    std::vector<double> v(g.data(), g.data() + g.size());
    return {{"layers", g.rows()}, {"heads", g.cols()}, {"values", v}};
}

HeadGrid grid_from_json(const nlohmann::json& j) {
    const int l = j.at("layers").get<int>();
    const int h = j.at("heads").get<int>();
    const auto v = j.at("values").get<std::vector<double>>();
    if (l <= 0 || h <= 0 || v.size() != static_cast<std::size_t>(l * h)) throw InputError("malformed head grid");
    HeadGrid g(l, h);
    std::copy(v.begin(), v.end(), g.data());
    return g;
}

}  // namespace

EvidenceReport::EvidenceReport(std::string pipeline, std::string model_id)
    : pipeline_(std::move(pipeline)), model_id_(std::move(model_id)) {}

EvidenceReport& EvidenceReport::mutate() {
    if (finalized_) throw std::logic_error("evidence report is finalized");
    return *this;
}

void EvidenceReport::add_mean(const std::string& name, StatKind kind, const std::vector<double>& samples) {
    if (samples.empty()) {
        note_unavailable(name, "no eligible cases");
        return;
    }
    Statistic s;
    s.name = name;
    s.kind = kind;
    s.count = samples.size();
    s.samples = samples;
    s.value = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
    add(std::move(s));
}

void EvidenceReport::add(Statistic stat) {
    mutate();
    check_range(stat);
    if (has(stat.name)) throw InputError("duplicate statistic " + stat.name);
    stats_.push_back(std::move(stat));
}

void EvidenceReport::note_unavailable(const std::string& name, const std::string& reason) {
    mutate().unavailable_[name] = reason;
}

void EvidenceReport::exclude_case(const std::string& reason) {
    mutate();
    ++excluded_;
    ++exclusions_[reason];
}

void EvidenceReport::set_profile(const HeadGrid& scores, const HeadGrid& profile) {
    mutate();
    profile_scores_ = scores;
    profile_ = profile;
}

void EvidenceReport::set_config(nlohmann::json config, std::string fingerprint) {
    mutate();
    config_ = std::move(config);
    fingerprint_ = std::move(fingerprint);
}

void EvidenceReport::finalize() {
    if (included_ + excluded_ != ingested_)
        throw std::logic_error("case accounting mismatch: " + std::to_string(included_) + " included + " +
                               std::to_string(excluded_) + " excluded != " + std::to_string(ingested_) + " ingested");
    finalized_ = true;
}

bool EvidenceReport::has(const std::string& name) const {
    return std::any_of(stats_.begin(), stats_.end(), [&](const Statistic& s) { return s.name == name; });
}

const Statistic& EvidenceReport::get(const std::string& name) const {
    for (const auto& s : stats_)
        if (s.name == name) return s;
    throw InputError("report has no statistic " + name);
}

nlohmann::json EvidenceReport::to_json() const {
    nlohmann::json j;
    j["schema"] = "evidence-report-v1";
    j["pipeline"] = pipeline_;
    j["model"] = model_id_;
    j["config"] = config_;
    j["config_fingerprint"] = fingerprint_;
    j["finalized"] = finalized_;
    j["cases"] = {{"ingested", ingested_}, {"included", included_}, {"excluded", excluded_}, {"exclusions", exclusions_}};
    auto& stats = j["statistics"] = nlohmann::json::array();
    for (const auto& s : stats_)
        stats.push_back({{"name", s.name}, {"kind", to_string(s.kind)}, {"value", s.value}, {"count", s.count}, {"samples", s.samples}});
    j["unavailable"] = unavailable_;
    if (profile_) j["head_profile"] = {{"scores", grid_json(*profile_scores_)}, {"profile", grid_json(*profile_)}};
    return j;
}

EvidenceReport EvidenceReport::from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema") != "evidence-report-v1") throw InputError("not an evidence-report-v1 document");
        EvidenceReport r(j.at("pipeline").get<std::string>(), j.at("model").get<std::string>());
        r.config_ = j.at("config");
        r.fingerprint_ = j.at("config_fingerprint").get<std::string>();
        const auto& c = j.at("cases");
        r.ingested_ = c.at("ingested").get<std::size_t>();
        r.included_ = c.at("included").get<std::size_t>();
        r.excluded_ = c.at("excluded").get<std::size_t>();
        r.exclusions_ = c.at("exclusions").get<std::map<std::string, std::size_t>>();
        for (const auto& s : j.at("statistics")) {
            Statistic st;
            st.name = s.at("name").get<std::string>();
            st.kind = parse_kind(s.at("kind").get<std::string>());
            st.value = s.at("value").get<double>();
            st.count = s.at("count").get<std::size_t>();
            st.samples = s.value("samples", std::vector<double>{});
            r.stats_.push_back(std::move(st));
        }
        r.unavailable_ = j.value("unavailable", std::map<std::string, std::string>{});
        if (j.contains("head_profile")) {
            r.profile_scores_ = grid_from_json(j["head_profile"].at("scores"));
            r.profile_ = grid_from_json(j["head_profile"].at("profile"));
        }
        r.finalized_ = j.value("finalized", true);
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed evidence report: ") + e.what());
    }
}

std::string EvidenceReport::to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "name,kind,value,count\n";
    for (const auto& s : stats_) out << s.name << ',' << to_string(s.kind) << ',' << s.value << ',' << s.count << '\n';
    return out.str();
}

void write_report(const EvidenceReport& report, const std::filesystem::path& prefix) {
    if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
    std::ofstream js(prefix.string() + ".json");
    std::ofstream csv(prefix.string() + ".csv");
    if (!js || !csv) throw InputError("cannot write report " + prefix.string());
    js << report.to_json().dump(2) << '\n';
    csv << report.to_csv();
}

// --- config ---------------------------------------------------------------------

nlohmann::json ExperimentConfig::to_json() const {
    return {{"top_heads", top_heads},
            {"top_positions", top_positions},
            {"correctness_gate", correctness_gate},
            {"seed", seed},
            {"capture_precision", precision == CapturePrecision::f16 ? "f16" : "f32"},
            {"color_pool", color_pool},
            {"animal_pool", animal_pool}};
}

std::string config_fingerprint(const ExperimentConfig& config, const ModelBundle& model,
                               const std::vector<CaseAnnotation>& cases) {
    std::uint64_t h = fnv1a64(config.to_json().dump());
    h = fnv1a64(model.id, h);
    for (const auto* t : {&model.templates.version, &model.templates.vqa, &model.templates.tqa,
                          &model.templates.vqa_color_question, &model.templates.alt_question})
        h = fnv1a64(*t, h);
    for (const auto& c : cases) {
        for (const auto* f : {&c.image, &c.animal, &c.color, &c.distractor, &c.split, &c.mask}) {
            h = fnv1a64(*f, h);
            h = fnv1a64(std::string_view("\x1f", 1), h);
        }
    }
    return hex64(h);
}

// --- pipelines ------------------------------------------------------------------

namespace {

struct Pools {
    std::vector<std::string> colors;
    std::vector<std::string> animals;
};

Pools pools_of(const ExperimentConfig& c) {
    return {c.color_pool.empty() ? toy_colors() : c.color_pool, c.animal_pool.empty() ? toy_animals() : c.animal_pool};
}

std::mt19937_64 case_rng(std::uint64_t seed, std::size_t index, std::uint64_t salt) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(salt)};
    return std::mt19937_64(seq);
}

// Uniform draw from `pool` minus `exclude`.
std::string pick_other(const std::vector<std::string>& pool, const std::set<std::string>& exclude, std::mt19937_64& rng) {
    std::vector<std::string> choices;
    for (const auto& p : pool)
        if (!exclude.count(p)) choices.push_back(p);
    if (choices.empty()) throw InputError("random baseline pool has no label distinct from the case");
    std::uniform_int_distribution<std::size_t> u(0, choices.size() - 1);
    return choices[u(rng)];
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

bool contains(const std::vector<int>& ids, int id) { return std::find(ids.begin(), ids.end(), id) != ids.end(); }

// Attribution target: the prediction when it matches, else the annotated
// word's first accepted id. nullopt when gated out.
std::optional<int> gate(const Trace& t, const TokenTarget& target, bool gate_on) {
    const int pred = t.predicted_token();
    if (contains(target.ids, pred)) return pred;
    if (gate_on) return std::nullopt;
    return target.ids.front();
}

double reciprocal_rank(const ModelWeights& w, const VectorD& v, ProjectionSpace space, const TokenTarget& t) {
    return 1.0 / rank_of(project(w, v, space), t);
}

double attention_sum(const Trace& t, HeadId h, const std::vector<int>& positions) {
    const auto row = t.attention(h);
    double s = 0.0;
    for (int p : positions) s += row[static_cast<std::size_t>(p)];
    return s;
}

double mean_attention(const Trace& t, const std::vector<HeadId>& heads, const std::vector<int>& positions) {
    double s = 0.0;
    for (const auto& h : heads) s += attention_sum(t, h, positions);
    return std::clamp(s / static_cast<double>(heads.size()), 0.0, 1.0);
}

std::vector<int> span_positions(const Span& s) {
    std::vector<int> v(static_cast<std::size_t>(std::max(0, s.size())));
    std::iota(v.begin(), v.end(), s.begin);
    return v;
}

TraceOptions trace_options(const ExperimentConfig& c) {
    TraceOptions o;
    o.precision = c.precision;
    return o;
}

void require_model(const ModelBundle& m) {
    if (!m.model || !m.tokenizer) throw InputError("model bundle is incomplete");
}

// Running per-head sum of S over included cases.
struct ProfileAccumulator {
    HeadGrid sum;
    std::size_t n = 0;

    void add(const HeadGrid& s) {
        if (n == 0) sum = HeadGrid::Zero(s.rows(), s.cols());
        sum += s;
        ++n;
    }
    void store(EvidenceReport& r) const {
        if (n == 0) return;
        const HeadGrid m = sum / static_cast<double>(n);
        HeadGrid p = HeadGrid::Zero(m.rows(), m.cols());
        if ((m.array() > 0.0).any()) p = normalize_profile(m);
        r.set_profile(m, p);
    }
};

template <typename Fn>
void for_each_case(const std::vector<CaseAnnotation>& cases, EvidenceReport& report, Fn&& fn) {
    report.set_ingested(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
        std::optional<std::string> excluded;
        try {
            excluded = fn(i, cases[i]);
        } catch (const InputError& e) {
            excluded = std::string("input error: ") + e.what();
        }
        if (excluded) report.exclude_case(*excluded);
        else report.include_case();
    }
}

const char* kWrongAnswer = "model answer differs from annotation";

}  // namespace

EvidenceReport run_tqa_evidence(const std::vector<CaseAnnotation>& cases, const ModelBundle& bundle,
                                const ExperimentConfig& config) {
    require_model(bundle);
    if (cases.empty()) throw InputError("no cases to analyze");
    const auto& model = *bundle.model;
    const auto& w = model.weights();
    const auto& tok = *bundle.tokenizer;
    const Pools pools = pools_of(config);
    const auto opts = trace_options(config);
    const auto unemb = ProjectionSpace::unembedding;

    EvidenceReport report("tqa", bundle.id);
    report.set_config(config.to_json(), config_fingerprint(config, bundle, cases));
    std::vector<double> a_share, b_rr, b_rr_rand, b_lm, c0_a, c0_d, c0_lm, c1_a, c1_d, c1_lm, d0, d1, d2;
    ProfileAccumulator profile;

    for_each_case(cases, report, [&](std::size_t i, const CaseAnnotation& c) -> std::optional<std::string> {
        const auto s0 = prepare_tqa_input(c.animal, c.color, c.animal, model.config(), tok, bundle.templates);
        const auto t0 = run_traced(model, s0.model_input(), s0.positions, opts);
        const auto color = make_token_target(tok, c.color);
        const auto target = gate(*t0, color, config.correctness_gate);
        if (!target) return kWrongAnswer;

        auto rng = case_rng(config.seed, i, 1);
        const auto random_color = make_token_target(tok, pick_other(pools.colors, {c.color}, rng));
        const auto animal = make_token_target(tok, c.animal);
        const auto distractor = make_token_target(tok, c.distractor);

        const auto attr = attribute(*t0, *target, config.top_heads);
        profile.add(attr.scores);
        const auto& heads = attr.top_heads;
        const int cp = s0.color.begin;

        // (a) share of positive position attribution landing on the color span.
        double on_color = 0.0, total = 0.0;
        for (const auto& [h, scores] : attr.position_scores)
            for (int p = 0; p < t0->length(); ++p) {
                const double s = std::max(0.0, scores[static_cast<std::size_t>(p)]);
                total += s;
                if (s0.color.contains(p)) on_color += s;
            }
        if (total > 0.0) a_share.push_back(100.0 * on_color / total);

        // (b) weighted value-output vectors at the color position.
        std::vector<double> rr, rr_rand, lm;
        for (const auto& h : heads) {
            const VectorD v = position_contribution(*t0, h, cp);
            rr.push_back(reciprocal_rank(w, v, unemb, color));
            rr_rand.push_back(reciprocal_rank(w, v, unemb, random_color));
            lm.push_back(logit_minus(w, v, *target, random_color.ids.front()));
        }
        b_rr.push_back(mean(rr));
        b_rr_rand.push_back(mean(rr_rand));
        b_lm.push_back(mean(lm));

        // (c) layer inputs at the color position, S0 and S1.
        const auto s1 = prepare_tqa_input(c.distractor, c.color, c.animal, model.config(), tok, bundle.templates);
        const auto t1 = run_traced(model, s1.model_input(), s1.positions, opts);
        const auto layer_inputs = [&](const Trace& t, int pos, const TokenTarget& first, const TokenTarget& second,
                                      std::vector<double>& out_first, std::vector<double>& out_second,
                                      std::vector<double>& out_lm) {
            std::vector<double> f, s, m;
            for (const auto& h : heads) {
                const VectorD v = t.layer_input_d(h.layer, pos);
                f.push_back(reciprocal_rank(w, v, unemb, first));
                s.push_back(reciprocal_rank(w, v, unemb, second));
                m.push_back(logit_minus(w, v, first.ids.front(), second.ids.front()));
            }
            out_first.push_back(mean(f));
            out_second.push_back(mean(s));
            out_lm.push_back(mean(m));
        };
        layer_inputs(*t0, cp, animal, distractor, c0_a, c0_d, c0_lm);
        // In S1 the context holds the distractor, so the gap is distractor minus animal.
        layer_inputs(*t1, s1.color.begin, distractor, animal, c1_d, c1_a, c1_lm);

        // (d) attention from the last position to the color span.
        const auto s2 = prepare_tqa_input(c.animal, c.color, c.distractor, model.config(), tok, bundle.templates);
        const auto t2 = run_traced(model, s2.model_input(), s2.positions, opts);
        d0.push_back(mean_attention(*t0, heads, span_positions(s0.color)));
        d1.push_back(mean_attention(*t1, heads, span_positions(s1.color)));
        d2.push_back(mean_attention(*t2, heads, span_positions(s2.color)));
        return std::nullopt;
    });

    report.add_mean("a.color_position_share", StatKind::proportion, a_share);
    report.add_mean("b.mrr_correct_color", StatKind::mrr, b_rr);
    report.add_mean("b.mrr_random_color", StatKind::mrr, b_rr_rand);
    report.add_mean("b.logit_minus_correct_vs_random", StatKind::logit, b_lm);
    report.add_mean("c.s0_mrr_animal", StatKind::mrr, c0_a);
    report.add_mean("c.s0_mrr_distractor", StatKind::mrr, c0_d);
    report.add_mean("c.s0_logit_minus", StatKind::logit, c0_lm);
    report.add_mean("c.s1_mrr_animal", StatKind::mrr, c1_a);
    report.add_mean("c.s1_mrr_distractor", StatKind::mrr, c1_d);
    report.add_mean("c.s1_logit_minus", StatKind::logit, c1_lm);
    report.add_mean("d.attention_s0", StatKind::attention, d0);
    report.add_mean("d.attention_s1", StatKind::attention, d1);
    report.add_mean("d.attention_s2", StatKind::attention, d2);
    profile.store(report);
    report.finalize();
    return report;
}

namespace {

// Grid cells whose mask area is mostly set, as visual positions.
std::vector<int> mask_positions(const std::string& mask_path, const PreparedInput& in, int image_size) {
    cv::Mat mask = load_image(mask_path);
    mask = preprocess_image(mask, image_size);
    cv::Mat gray;
    cv::cvtColor(mask, gray, cv::COLOR_BGR2GRAY);
    const auto& pm = in.positions;
    std::vector<int> out;
    for (int r = 0; r < pm.rows(); ++r)
        for (int c = 0; c < pm.cols(); ++c) {
            const cv::Rect cell(c * gray.cols / pm.cols(), r * gray.rows / pm.rows(),
                                (c + 1) * gray.cols / pm.cols() - c * gray.cols / pm.cols(),
                                (r + 1) * gray.rows / pm.rows() - r * gray.rows / pm.rows());
            if (cv::mean(gray(cell))[0] > 127.5) out.push_back(pm.position_of({r, c}));
        }
    return out;
}

std::vector<int> top_visual_positions(const AttributionResult& attr, const PositionMap& pm, int n) {
    std::vector<std::pair<double, int>> scored;
    for (int p = pm.visual().begin; p < pm.visual().end; ++p) {
        double s = 0.0;
        for (const auto& [h, scores] : attr.position_scores) s += scores[static_cast<std::size_t>(p)];
        scored.emplace_back(s, p);
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<int> out;
    for (std::size_t i = 0; i < scored.size() && static_cast<int>(i) < n; ++i) out.push_back(scored[i].second);
    return out;
}

PreparedInput prepare_case(const ModelBundle& b, const CaseAnnotation& c, const std::string& question) {
    if (!b.encoder) throw CapabilityError("model '" + b.id + "' has no vision encoder");
    return prepare_vqa_input(load_image(c.image), question, b.model->config(), *b.tokenizer, *b.encoder, b.templates);
}

std::string case_tag(const CaseAnnotation& c, std::size_t i) {
    return "case" + std::to_string(i) + "_line" + std::to_string(c.line);
}

}  // namespace

EvidenceReport run_vqa_evidence(const std::vector<CaseAnnotation>& cases, const ModelBundle& bundle,
                                const ExperimentConfig& config) {
    require_model(bundle);
    if (cases.empty()) throw InputError("no cases to analyze");
    const auto& model = *bundle.model;
    const auto& w = model.weights();
    const auto& tok = *bundle.tokenizer;
    const Pools pools = pools_of(config);
    const auto opts = trace_options(config);
    const auto unemb = ProjectionSpace::unembedding;
    const auto emb = ProjectionSpace::embedding;
    if (!config.heatmap_dir.empty()) std::filesystem::create_directories(config.heatmap_dir);

    EvidenceReport report("vqa", bundle.id);
    report.set_config(config.to_json(), config_fingerprint(config, bundle, cases));
    std::vector<double> a_mask, a_argmax, b_rr, b_rr_rand, b_lm, c_a, c_o, c_lm, d_same, d_other;
    std::vector<double> e_color, e_rcolor, e_animal, e_ranimal, e_ctrl_color, e_ctrl_animal;
    ProfileAccumulator profile;

    for_each_case(cases, report, [&](std::size_t i, const CaseAnnotation& c) -> std::optional<std::string> {
        if (c.image.empty()) return std::string("no image");
        const std::string question = render_template(bundle.templates.vqa_color_question, {{"animal", c.animal}});
        const auto in = prepare_case(bundle, c, question);
        const auto t = run_traced(model, in.model_input(), in.positions, opts);
        const auto color = make_token_target(tok, c.color);
        const auto target = gate(*t, color, config.correctness_gate);
        if (!target) return kWrongAnswer;

        auto rng = case_rng(config.seed, i, 2);
        const auto random_color = make_token_target(tok, pick_other(pools.colors, {c.color}, rng));
        const std::string other_name = pick_other(pools.animals, {c.animal}, rng);
        const auto animal = make_token_target(tok, c.animal);
        const auto other_animal = make_token_target(tok, other_name);
        const auto random_animal = make_token_target(tok, pick_other(pools.animals, {c.animal}, rng));

        const auto attr = attribute(*t, *target, config.top_heads);
        profile.add(attr.scores);
        const auto& heads = attr.top_heads;
        const auto top = top_visual_positions(attr, in.positions, config.top_positions);

        // (a) heatmaps and, with a mask, how much positive mass lands on the animal.
        HeadSelection sel;
        sel.k = config.top_heads;
        auto logprob_map = patch_score_map(*t, *target, sel);
        if (!config.heatmap_dir.empty()) {
            auto avg_map = average_attention_map(*t);
            const auto tag = case_tag(c, i);
            write_png(render_heatmap(in.image, logprob_map, "logprob").composite, config.heatmap_dir / (tag + "_logprob.png"));
            write_png(render_heatmap(in.image, avg_map, "avg-attention").composite, config.heatmap_dir / (tag + "_avg_attention.png"));
        }
        if (!c.mask.empty()) {
            const auto masked = mask_positions(c.mask, in, model.config().vision.image_size);
            double inside = 0.0, total = 0.0;
            for (int r = 0; r < logprob_map.rows; ++r)
                for (int col = 0; col < logprob_map.cols; ++col) {
                    const double s = std::max(0.0, logprob_map.at(r, col));
                    total += s;
                    if (contains(masked, in.positions.position_of({r, col}))) inside += s;
                }
            if (total > 0.0) a_mask.push_back(100.0 * inside / total);
            a_argmax.push_back(contains(masked, in.positions.position_of(logprob_map.argmax())) ? 1.0 : 0.0);
        }

        // (b) weighted value-output vectors of the top positions, summed over top heads.
        std::vector<double> rr, rr_rand, lm;
        for (int p : top) {
            VectorD v = VectorD::Zero(w.config.d_model);
            for (const auto& h : heads) v += position_contribution(*t, h, p);
            rr.push_back(reciprocal_rank(w, v, unemb, color));
            rr_rand.push_back(reciprocal_rank(w, v, unemb, random_color));
            lm.push_back(logit_minus(w, v, *target, random_color.ids.front()));
        }
        b_rr.push_back(mean(rr));
        b_rr_rand.push_back(mean(rr_rand));
        b_lm.push_back(mean(lm));

        // (c) layer inputs of the top positions at each top head's layer.
        std::vector<double> ca, co, cl;
        for (const auto& h : heads)
            for (int p : top) {
                const VectorD v = t->layer_input_d(h.layer, p);
                ca.push_back(reciprocal_rank(w, v, unemb, animal));
                co.push_back(reciprocal_rank(w, v, unemb, other_animal));
                cl.push_back(logit_minus(w, v, animal.ids.front(), other_animal.ids.front()));
            }
        c_a.push_back(mean(ca));
        c_o.push_back(mean(co));
        c_lm.push_back(mean(cl));

        // (d) attention on the top positions when the question names another animal.
        const std::string swapped = render_template(bundle.templates.vqa_color_question, {{"animal", other_name}});
        const auto in_other = prepare_case(bundle, c, swapped);
        if (in_other.positions.visual() != in.positions.visual()) throw InputError("visual span moved between prompts");
        const auto t_other = run_traced(model, in_other.model_input(), in_other.positions, opts);
        d_same.push_back(mean_attention(*t, heads, top));
        d_other.push_back(mean_attention(*t_other, heads, top));

        // (e) raw visual embeddings of the top positions against E, with random-position controls.
        std::vector<double> ec, erc, ea, era, ctrl_c, ctrl_a;
        const auto embedding_row = [&](int p) {
            const auto r = t->residual(-1, p);
            VectorD v(w.config.d_model);
            for (int k = 0; k < v.size(); ++k) v[k] = r[static_cast<std::size_t>(k)];
            return v;
        };
        for (int p : top) {
            const VectorD v = embedding_row(p);
            ec.push_back(reciprocal_rank(w, v, emb, color));
            erc.push_back(reciprocal_rank(w, v, emb, random_color));
            ea.push_back(reciprocal_rank(w, v, emb, animal));
            era.push_back(reciprocal_rank(w, v, emb, random_animal));
        }
        std::vector<int> visual(static_cast<std::size_t>(in.positions.visual().size()));
        std::iota(visual.begin(), visual.end(), in.positions.visual().begin);
        std::shuffle(visual.begin(), visual.end(), rng);
        visual.resize(std::min(visual.size(), top.size()));
        for (int p : visual) {
            const VectorD v = embedding_row(p);
            ctrl_c.push_back(reciprocal_rank(w, v, emb, color));
            ctrl_a.push_back(reciprocal_rank(w, v, emb, animal));
        }
        e_color.push_back(mean(ec));
        e_rcolor.push_back(mean(erc));
        e_animal.push_back(mean(ea));
        e_ranimal.push_back(mean(era));
        e_ctrl_color.push_back(mean(ctrl_c));
        e_ctrl_animal.push_back(mean(ctrl_a));
        return std::nullopt;
    });

    report.add_mean("a.mask_share", StatKind::proportion, a_mask);
    report.add_mean("a.argmax_in_mask", StatKind::proportion, [&] {
        auto v = a_argmax;
        for (auto& x : v) x *= 100.0;
        return v;
    }());
    report.add_mean("b.mrr_correct_color", StatKind::mrr, b_rr);
    report.add_mean("b.mrr_random_color", StatKind::mrr, b_rr_rand);
    report.add_mean("b.logit_minus_correct_vs_random", StatKind::logit, b_lm);
    report.add_mean("c.mrr_animal", StatKind::mrr, c_a);
    report.add_mean("c.mrr_other_animal", StatKind::mrr, c_o);
    report.add_mean("c.logit_minus", StatKind::logit, c_lm);
    report.add_mean("d.attention_same_animal", StatKind::attention, d_same);
    report.add_mean("d.attention_other_animal", StatKind::attention, d_other);
    report.add_mean("e.mrr_color", StatKind::mrr, e_color);
    report.add_mean("e.mrr_random_color", StatKind::mrr, e_rcolor);
    report.add_mean("e.mrr_animal", StatKind::mrr, e_animal);
    report.add_mean("e.mrr_random_animal", StatKind::mrr, e_ranimal);
    report.add_mean("e.control_mrr_color", StatKind::mrr, e_ctrl_color);
    report.add_mean("e.control_mrr_animal", StatKind::mrr, e_ctrl_animal);
    profile.store(report);
    report.finalize();
    return report;
}

EvidenceReport run_alt_question_probe(const std::vector<CaseAnnotation>& cases, const ModelBundle& bundle,
                                      const ExperimentConfig& config, const std::string& question_template) {
    require_model(bundle);
    if (cases.empty()) throw InputError("no cases to analyze");
    const auto& model = *bundle.model;
    const auto& tok = *bundle.tokenizer;
    const auto opts = trace_options(config);

    EvidenceReport report("alt-question", bundle.id);
    auto cfg_json = config.to_json();
    cfg_json["question_template"] = question_template;
    report.set_config(cfg_json, hex64(fnv1a64(question_template, std::stoull(config_fingerprint(config, bundle, cases), nullptr, 16))));
    std::vector<double> mass;
    ProfileAccumulator profile;

    for_each_case(cases, report, [&](std::size_t, const CaseAnnotation& c) -> std::optional<std::string> {
        if (c.image.empty()) return std::string("no image");
        if (c.mask.empty()) return std::string("no animal mask");
        const auto in = prepare_case(bundle, c, render_template(question_template, {{"animal", c.animal}}));
        const auto t = run_traced(model, in.model_input(), in.positions, opts);
        const auto animal = make_token_target(tok, c.animal);
        const auto target = gate(*t, animal, config.correctness_gate);
        if (!target) return kWrongAnswer;
        const auto attr = attribute(*t, *target, config.top_heads);
        profile.add(attr.scores);
        mass.push_back(mean_attention(*t, attr.top_heads, mask_positions(c.mask, in, model.config().vision.image_size)));
        return std::nullopt;
    });

    report.add_mean("animal_patch_attention", StatKind::attention, mass);
    profile.store(report);
    report.finalize();
    return report;
}

// --- comparison -----------------------------------------------------------------

nlohmann::json ModelComparison::to_json() const {
    nlohmann::json j;
    j["schema"] = "head-comparison-v1";
    j["k"] = k;
    for (const auto& [name, heads] : top) {
        auto& arr = j["top"][name] = nlohmann::json::array();
        for (const auto& h : heads) arr.push_back(h.label());
    }
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : pairs) {
        nlohmann::json deltas = nlohmann::json::object();
        for (int l = 0; l < p.delta.rows(); ++l)
            for (int h = 0; h < p.delta.cols(); ++h) deltas[HeadId{l, h}.label()] = p.delta(l, h);
        j["pairs"].push_back({{"a", p.a}, {"b", p.b}, {"overlap", p.overlap}, {"delta_points", deltas}});
    }
    return j;
}

ModelComparison compare_models(const std::map<std::string, HeadGrid>& profiles, int k) {
    if (profiles.size() < 2) throw InputError("comparison needs at least two profiles");
    const auto& first = profiles.begin()->second;
    for (const auto& [name, g] : profiles)
        if (g.rows() != first.rows() || g.cols() != first.cols())
            throw InputError("profile '" + name + "' is " + std::to_string(g.rows()) + "x" + std::to_string(g.cols()) +
                             ", expected " + std::to_string(first.rows()) + "x" + std::to_string(first.cols()));
    ModelComparison out;
    out.k = k;
    for (const auto& [name, g] : profiles) out.top[name] = top_heads(g, k);
    for (auto a = profiles.begin(); a != profiles.end(); ++a)
        for (auto b = std::next(a); b != profiles.end(); ++b)
            out.pairs.push_back({a->first, b->first, top_head_overlap(a->second, b->second, k), (b->second - a->second) * 100.0});
    return out;
}

// --- figures --------------------------------------------------------------------

void write_head_grid_png(const HeadGrid& profile, const std::filesystem::path& path, int cell_px) {
    if (profile.size() == 0) throw InputError("empty head grid");
    const double mx = profile.maxCoeff();
    cv::Mat g(static_cast<int>(profile.rows()), static_cast<int>(profile.cols()), CV_8U);
    for (int l = 0; l < profile.rows(); ++l)
        for (int h = 0; h < profile.cols(); ++h)
            g.at<std::uint8_t>(l, h) = mx > 0.0 ? cv::saturate_cast<std::uint8_t>(255.0 * std::max(0.0, profile(l, h)) / mx) : 0;
    cv::Mat big, color;
    cv::resize(g, big, cv::Size(g.cols * cell_px, g.rows * cell_px), 0, 0, cv::INTER_NEAREST);
    cv::applyColorMap(big, color, cv::COLORMAP_VIRIDIS);
    write_png(color, path);
}

std::string head_grid_csv(const HeadGrid& grid) {
    std::ostringstream out;
    out.precision(17);
    out << "layer,head,label,value\n";
    for (int l = 0; l < grid.rows(); ++l)
        for (int h = 0; h < grid.cols(); ++h) out << l << ',' << h << ',' << HeadId{l, h}.label() << ',' << grid(l, h) << '\n';
    return out.str();
}

// --- stub data ------------------------------------------------------------------

std::filesystem::path make_stub_cases(const std::filesystem::path& dir, int n, std::uint64_t seed, int image_size) {
    if (n <= 0) throw InputError("case count must be positive");
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    const auto& colors = toy_colors();
    const auto& animals = toy_animals();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pos(0, image_size - image_size / 3);
    const auto bg = StubVisionEncoder::background();
    const auto path = dir / "cases.txt";
    std::ofstream out(path);
    out << "# desk-scale stub cases, seed " << seed << "\n";
    for (int i = 0; i < n; ++i) {
        const auto& animal = animals[static_cast<std::size_t>(i) % animals.size()];
        const auto& color = colors[static_cast<std::size_t>(i * 5 + 1) % colors.size()];
        const auto& distractor = animals[(static_cast<std::size_t>(i) + 1 + static_cast<std::size_t>(rng() % (animals.size() - 1))) % animals.size()];
        cv::Mat img(image_size, image_size, CV_8UC3, cv::Scalar(bg[0], bg[1], bg[2]));
        cv::Mat mask(image_size, image_size, CV_8UC3, cv::Scalar(0, 0, 0));
        const cv::Rect blob(pos(rng), pos(rng), image_size / 3, image_size / 3);
        const auto px = StubVisionEncoder::palette(color);
        img(blob).setTo(cv::Scalar(px[0], px[1], px[2]));
        mask(blob).setTo(cv::Scalar(255, 255, 255));
        const std::string name = "case" + std::to_string(i) + ".png";
        write_png(img, dir / "images" / name);
        write_png(mask, dir / "masks" / name);
        out << "image=images/" << name << "\tanimal=" << animal << "\tcolor=" << color << "\tdistractor=" << distractor
            << "\tsplit=stub\tmask=masks/" << name << "\n";
    }
    return path;
}

}  // namespace patchlens
