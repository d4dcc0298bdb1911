#include "patchlens/trace.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "patchlens/errors.hpp"

namespace patchlens {

Tolerances Tolerances::for_precision(CapturePrecision p) {
    Tolerances t;
    if (p == CapturePrecision::f16) {
        t.residual *= 10;
        t.head_sum *= 10;
        t.position_sum *= 10;
        t.attention_row *= 10;
    }
    return t;
}

void Trace::check_head(HeadId head) const {
    if (head.layer < 0 || head.layer >= n_layers_ || head.head < 0 || head.head >= n_heads_) {
        throw IndexError("head " + head.label() + " outside " + std::to_string(n_layers_) + " layers x " +
                         std::to_string(n_heads_) + " heads");
    }
}

void Trace::check_position(int position) const {
    if (position < 0 || position >= length_) {
        throw IndexError("position " + std::to_string(position) + " outside [0, " + std::to_string(length_) + ")");
    }
}

std::span<const float> Trace::residual(int layer, int position) const {
    if (layer < -1 || layer >= n_layers_) throw IndexError("residual layer " + std::to_string(layer) + " out of range");
    check_position(position);
    const std::size_t off = (static_cast<std::size_t>(layer + 1) * length_ + position) * d_model_;
    return {residuals_.data() + off, static_cast<std::size_t>(d_model_)};
}

VectorD Trace::layer_input_d(int layer, int position) const {
    const auto h = layer_input(layer, position);
    VectorD out(d_model_);
    for (int i = 0; i < d_model_; ++i) out[i] = h[static_cast<std::size_t>(i)];
    return out;
}

std::span<const float> Trace::attention(HeadId head) const { return attention(head, length_ - 1); }

std::span<const float> Trace::attention(HeadId head, int query) const {
    check_head(head);
    check_position(query);
    std::size_t row = 0;
    std::size_t rows = 1;
    if (options_.full_attention) {
        rows = static_cast<std::size_t>(length_);
        row = static_cast<std::size_t>(query);
    } else if (query != length_ - 1) {
        throw CapabilityError("trace captured only the last query row; rerun with full attention capture");
    }
    const std::size_t off =
        ((static_cast<std::size_t>(head.layer) * n_heads_ + head.head) * rows + row) * length_;
    return {attention_.data() + off, static_cast<std::size_t>(length_)};
}

std::span<const float> Trace::attn_out(int layer) const {
    if (layer < 0 || layer >= n_layers_) throw IndexError("layer out of range");
    return {attn_out_.data() + static_cast<std::size_t>(layer) * d_model_, static_cast<std::size_t>(d_model_)};
}

std::span<const float> Trace::ffn_out(int layer) const {
    if (layer < 0 || layer >= n_layers_) throw IndexError("layer out of range");
    return {ffn_out_.data() + static_cast<std::size_t>(layer) * d_model_, static_cast<std::size_t>(d_model_)};
}

int Trace::predicted_token() const {
    Eigen::Index best = 0;
    logits_.maxCoeff(&best);
    return static_cast<int>(best);
}

namespace {

VectorD compute_value_output(const ModelWeights& w, HeadId head, const VectorD& layer_input) {
    const auto& cfg = w.config;
    const auto& lw = w.layers[static_cast<std::size_t>(head.layer)];
    const int dh = cfg.head_dim();
    const int g = head.head / cfg.group_size();
    const VectorD x = rms_norm(layer_input, lw.attn_norm, static_cast<double>(cfg.rms_eps));
    VectorD v = lw.wv.middleRows(g * dh, dh).cast<double>() * x;
    if (cfg.qkv_bias) v += lw.bv.segment(g * dh, dh).cast<double>();
    return lw.wo.middleCols(head.head * dh, dh).cast<double>() * v;
}

}  // namespace

VectorD Trace::value_output(HeadId head, int position) const {
    check_head(head);
    check_position(position);
    if (!value_cache_.empty()) {
        const std::size_t off =
            ((static_cast<std::size_t>(head.layer) * n_heads_ + head.head) * length_ + position) * d_model_;
        return Eigen::Map<const VectorD>(value_cache_.data() + off, d_model_);
    }
    return compute_value_output(*weights_, head, layer_input_d(head.layer, position));
}

std::shared_ptr<const Trace> TraceBuilder::build(std::shared_ptr<const ModelWeights> weights,
                                                 std::vector<int> tokens, PositionMap positions,
                                                 TraceOptions options, ForwardCapture&& cap,
                                                 bool apply_precision) {
    const auto& cfg = weights->config;
    std::shared_ptr<Trace> t(new Trace());
    t->length_ = static_cast<int>(tokens.size());
    t->n_layers_ = cfg.n_layers;
    t->n_heads_ = cfg.n_heads;
    t->d_model_ = cfg.d_model;
    t->weights_ = std::move(weights);
    t->options_ = options;
    t->positions_ = std::move(positions);
    t->tokens_ = std::move(tokens);
    t->residuals_ = std::move(cap.residuals);
    t->attention_ = std::move(cap.attention);
    t->attn_out_ = std::move(cap.attn_out_last);
    t->ffn_out_ = std::move(cap.ffn_out_last);
    t->logits_ = std::move(cap.logits);

    const std::size_t rows = options.full_attention ? static_cast<std::size_t>(t->length_) : 1;
    const std::size_t L = static_cast<std::size_t>(t->n_layers_);
    const std::size_t T = static_cast<std::size_t>(t->length_);
    const std::size_t D = static_cast<std::size_t>(t->d_model_);
    if (t->residuals_.size() != (L + 1) * T * D || t->attention_.size() != L * t->n_heads_ * rows * T ||
        t->attn_out_.size() != L * D || t->ffn_out_.size() != L * D ||
        t->logits_.size() != t->weights_->config.vocab_size) {
        throw InputError("trace arrays do not match model dimensions");
    }

    if (apply_precision && options.precision == CapturePrecision::f16) {
        auto round_half = [](std::vector<float>& xs) {
            for (auto& x : xs) x = static_cast<float>(Eigen::half(x));
        };
        round_half(t->residuals_);
        round_half(t->attn_out_);
        round_half(t->ffn_out_);
    }

    if (options.eager_values) {
        t->value_cache_.resize(L * t->n_heads_ * T * D);
        for (int l = 0; l < t->n_layers_; ++l) {
            for (int p = 0; p < t->length_; ++p) {
                const VectorD input = t->layer_input_d(l, p);
                for (int j = 0; j < t->n_heads_; ++j) {
                    const VectorD vo = compute_value_output(*t->weights_, {l, j}, input);
                    const std::size_t off = ((static_cast<std::size_t>(l) * t->n_heads_ + j) * T + p) * D;
                    std::copy(vo.data(), vo.data() + D, t->value_cache_.begin() + static_cast<std::ptrdiff_t>(off));
                }
            }
        }
    }
    return t;
}

std::shared_ptr<const Trace> run_traced(const ModelHandle& model, const ModelInput& input,
                                        const PositionMap& positions, const TraceOptions& options) {
    if (!model.capabilities().activation_exposure) {
        throw CapabilityError("model '" + model.config().id + "' does not expose activations");
    }
    const int t_len = static_cast<int>(input.tokens.size());
    if (t_len < 1) throw InputError("run_traced: empty token sequence");
    if (positions.length() != t_len) {
        throw InputError("run_traced: position map length " + std::to_string(positions.length()) +
                         " != token count " + std::to_string(t_len));
    }
    positions.validate();
    const Matrix* visual = nullptr;
    if (input.visual.has_value()) {
        if (!positions.has_visual()) throw InputError("run_traced: visual block given but no visual span");
        if (input.visual->rows() != positions.visual().size()) {
            throw InputError("run_traced: visual block has " + std::to_string(input.visual->rows()) +
                             " rows, visual span has " + std::to_string(positions.visual().size()));
        }
        if (input.visual->cols() != model.config().d_model) {
            throw InputError("run_traced: visual block width " + std::to_string(input.visual->cols()) +
                             " != hidden size " + std::to_string(model.config().d_model));
        }
        visual = &*input.visual;
    } else if (positions.has_visual()) {
        throw InputError("run_traced: position map declares a visual span but no visual block was given");
    }

    ForwardCapture cap;
    cap.full_attention = options.full_attention;
    {
        auto ticket = model.queue().acquire();
        const Matrix x = embed_inputs(model.weights(), input.tokens, visual, positions.visual().begin);
        forward(model.weights(), x, cap);
        model.count_traced();
    }
    return TraceBuilder::build(model.shared_weights(), input.tokens, positions, options, std::move(cap));
}

VectorD head_output(const Trace& trace, HeadId head) {
    trace.check_head(head);
    const auto alpha = trace.attention(head);
    VectorD out = VectorD::Zero(trace.d_model());
    for (int p = 0; p < trace.length(); ++p) {
        const double a = alpha[static_cast<std::size_t>(p)];
        if (a == 0.0) continue;
        out += a * trace.value_output(head, p);
    }
    return out;
}

VectorD position_contribution(const Trace& trace, HeadId head, int position, std::optional<int> query) {
    trace.check_head(head);
    trace.check_position(position);
    const int q = query.value_or(trace.length() - 1);
    const auto alpha = trace.attention(head, q);
    const double a = alpha[static_cast<std::size_t>(position)];
    if (a == 0.0) return VectorD::Zero(trace.d_model());
    return a * trace.value_output(head, position);
}

// ---------------------------------------------------------------------------
// trace-format-v1
//
//   bytes 0..7   magic "PLTRACE1"
//   u64 LE       metadata length N
//   N bytes      UTF-8 JSON metadata (format, model id, dims, options,
//                position map, array table with name/dtype/shape/offset)
//   remainder    array payloads, little-endian, in table order

namespace {

constexpr char kMagic[8] = {'P', 'L', 'T', 'R', 'A', 'C', 'E', '1'};

struct ArrayEntry {
    std::string name;
    std::string dtype;
    std::vector<std::size_t> shape;
    const void* data;
    std::size_t bytes;
};

nlohmann::json span_json(const Span& s) { return {s.begin, s.end}; }

Span span_from(const nlohmann::json& j) { return {j.at(0).get<int>(), j.at(1).get<int>()}; }

}  // namespace

void save_trace(const Trace& trace, const std::filesystem::path& path, const std::string& model_id) {
    const std::size_t L = static_cast<std::size_t>(trace.n_layers());
    const std::size_t H = static_cast<std::size_t>(trace.n_heads());
    const std::size_t T = static_cast<std::size_t>(trace.length());
    const std::size_t D = static_cast<std::size_t>(trace.d_model());
    const std::size_t rows = trace.has_full_attention() ? T : 1;

    // Gather via public accessors so the layout is defined here, not by Trace internals.
    std::vector<float> residuals;
    residuals.reserve((L + 1) * T * D);
    for (int l = -1; l < trace.n_layers(); ++l)
        for (int p = 0; p < trace.length(); ++p) {
            auto r = trace.residual(l, p);
            residuals.insert(residuals.end(), r.begin(), r.end());
        }
    std::vector<float> attention;
    attention.reserve(L * H * rows * T);
    for (int l = 0; l < trace.n_layers(); ++l)
        for (int j = 0; j < trace.n_heads(); ++j)
            for (std::size_t q = 0; q < rows; ++q) {
                const int query = trace.has_full_attention() ? static_cast<int>(q) : trace.length() - 1;
                auto a = trace.attention({l, j}, query);
                attention.insert(attention.end(), a.begin(), a.end());
            }
    std::vector<float> attn_out, ffn_out;
    for (int l = 0; l < trace.n_layers(); ++l) {
        auto a = trace.attn_out(l);
        auto f = trace.ffn_out(l);
        attn_out.insert(attn_out.end(), a.begin(), a.end());
        ffn_out.insert(ffn_out.end(), f.begin(), f.end());
    }
    std::vector<std::int32_t> tokens(trace.tokens().begin(), trace.tokens().end());
    const Vector& logits = trace.logits();

    std::vector<ArrayEntry> arrays = {
        {"tokens", "i32", {T}, tokens.data(), tokens.size() * 4},
        {"residuals", "f32", {L + 1, T, D}, residuals.data(), residuals.size() * 4},
        {trace.has_full_attention() ? "attention_full" : "attention_last", "f32",
         trace.has_full_attention() ? std::vector<std::size_t>{L, H, T, T} : std::vector<std::size_t>{L, H, T},
         attention.data(), attention.size() * 4},
        {"attn_out_last", "f32", {L, D}, attn_out.data(), attn_out.size() * 4},
        {"ffn_out_last", "f32", {L, D}, ffn_out.data(), ffn_out.size() * 4},
        {"logits", "f32", {static_cast<std::size_t>(logits.size())}, logits.data(),
         static_cast<std::size_t>(logits.size()) * 4},
    };

    const auto& pm = trace.positions();
    nlohmann::json meta = {
        {"format", "trace-format-v1"},
        {"model_id", model_id},
        {"T", T},
        {"L", L},
        {"H", H},
        {"d", D},
        {"B", logits.size()},
        {"precision", trace.options().precision == CapturePrecision::f16 ? "f16" : "f32"},
        {"position_map",
         {{"length", pm.length()},
          {"visual", span_json(pm.visual())},
          {"rows", pm.rows()},
          {"cols", pm.cols()},
          {"question", span_json(pm.question())}}},
    };
    std::size_t offset = 0;
    for (const auto& a : arrays) {
        meta["arrays"].push_back({{"name", a.name}, {"dtype", a.dtype}, {"shape", a.shape}, {"offset", offset},
                                  {"bytes", a.bytes}});
        offset += a.bytes;
    }
    const std::string meta_str = meta.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open " + path.string() + " for writing");
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t n = meta_str.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    for (const auto& a : arrays) out.write(static_cast<const char*>(a.data), static_cast<std::streamsize>(a.bytes));
    if (!out) throw InputError("write failed for " + path.string());
}

std::shared_ptr<const Trace> load_trace(const std::filesystem::path& path,
                                        std::shared_ptr<const ModelWeights> weights) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open trace archive " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw InputError("not a trace-format-v1 archive");
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    std::string meta_str(n, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(n));
    if (!in) throw InputError("truncated trace archive");
    const auto meta = nlohmann::json::parse(meta_str);
    if (meta.at("format") != "trace-format-v1") throw InputError("unsupported trace format");

    const auto& cfg = weights->config;
    if (meta.at("L").get<int>() != cfg.n_layers || meta.at("H").get<int>() != cfg.n_heads ||
        meta.at("d").get<int>() != cfg.d_model || meta.at("B").get<int>() != cfg.vocab_size) {
        throw InputError("trace archive dimensions do not match the model");
    }
    const std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    auto read_array = [&](const std::string& name) -> std::pair<const char*, std::size_t> {
        for (const auto& a : meta.at("arrays")) {
            if (a.at("name") == name) {
                const auto off = a.at("offset").get<std::size_t>();
                const auto bytes = a.at("bytes").get<std::size_t>();
                if (off + bytes > payload.size()) throw InputError("trace archive array out of bounds: " + name);
                return {payload.data() + off, bytes};
            }
        }
        return {nullptr, 0};
    };
    auto floats = [&](const std::string& name) {
        auto [ptr, bytes] = read_array(name);
        std::vector<float> v(bytes / 4);
        if (ptr != nullptr) std::memcpy(v.data(), ptr, bytes);
        return v;
    };

    TraceOptions opts;
    opts.precision = meta.at("precision") == "f16" ? CapturePrecision::f16 : CapturePrecision::f32;
    ForwardCapture cap;
    cap.residuals = floats("residuals");
    if (read_array("attention_full").first != nullptr) {
        opts.full_attention = true;
        cap.attention = floats("attention_full");
    } else {
        cap.attention = floats("attention_last");
    }
    cap.attn_out_last = floats("attn_out_last");
    cap.ffn_out_last = floats("ffn_out_last");
    const auto lg = floats("logits");
    cap.logits = Eigen::Map<const Vector>(lg.data(), static_cast<Eigen::Index>(lg.size()));

    auto [tok_ptr, tok_bytes] = read_array("tokens");
    std::vector<int> tokens(tok_bytes / 4);
    if (tok_ptr != nullptr) std::memcpy(tokens.data(), tok_ptr, tok_bytes);

    const auto& pmj = meta.at("position_map");
    const Span visual = span_from(pmj.at("visual"));
    const Span question = span_from(pmj.at("question"));
    PositionMap pm = visual.empty()
                         ? PositionMap::text_only(pmj.at("length").get<int>(), question)
                         : PositionMap::with_visual(pmj.at("length").get<int>(), visual, pmj.at("rows").get<int>(),
                                                    pmj.at("cols").get<int>(), question);
    // Precision rounding already happened before the archive was written.
    return TraceBuilder::build(std::move(weights), std::move(tokens), std::move(pm), opts, std::move(cap),
                               /*apply_precision=*/false);
}

}  // namespace patchlens
