#include "patchlens/mm_adapter.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "patchlens/errors.hpp"
#include "patchlens/hash.hpp"
#include "patchlens/projection.hpp"

namespace patchlens {

namespace {

struct PaletteEntry {
    const char* name;
    cv::Vec3b bgr;
};

// Background sits away from every palette entry so plain regions classify as
// "no color".
const PaletteEntry kPalette[] = {
    {"red", {40, 40, 220}},      {"orange", {30, 140, 250}}, {"yellow", {40, 230, 240}},
    {"green", {50, 180, 50}},    {"blue", {220, 80, 40}},    {"purple", {160, 40, 130}},
    {"pink", {200, 150, 250}},   {"brown", {30, 75, 140}},   {"black", {15, 15, 15}},
    {"white", {245, 245, 245}},  {"gray", {128, 128, 128}},  {"gold", {50, 180, 210}},
};
const cv::Vec3b kBackground(110, 100, 60);

double dist2(const cv::Vec3d& a, const cv::Vec3d& b) {
    const cv::Vec3d d = a - b;
    return d.dot(d);
}

struct Slot {
    std::string name;
    std::size_t begin = 0;
    std::size_t end = 0;
};

// render_template that also reports where each substitution landed.
std::string render_tracked(const std::string& tmpl, const std::map<std::string, std::string>& values,
                           std::vector<Slot>& slots) {
    std::string out;
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const auto close = tmpl.find('}', i + 1);
            if (close != std::string::npos) {
                const std::string key = tmpl.substr(i + 1, close - i - 1);
                if (auto it = values.find(key); it != values.end()) {
                    slots.push_back({key, out.size(), out.size() + it->second.size()});
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out += tmpl[i++];
    }
    return out;
}

// Tokens of `pieces` overlapping bytes [begin, end), shifted by `offset`.
Span span_of(const std::vector<TokenPiece>& pieces, std::size_t begin, std::size_t end, int offset) {
    int first = -1;
    int last = -1;
    for (std::size_t t = 0; t < pieces.size(); ++t) {
        if (pieces[t].end > begin && pieces[t].begin < end) {
            if (first < 0) first = static_cast<int>(t);
            last = static_cast<int>(t);
        }
    }
    if (first < 0) return {};
    return {first + offset, last + 1 + offset};
}

Span slot_span(const std::vector<Slot>& slots, const std::string& name, const std::vector<TokenPiece>& pieces,
               int offset) {
    for (const auto& s : slots)
        if (s.name == name) return span_of(pieces, s.begin, s.end, offset);
    return {};
}

void check_budget(std::size_t length, const ModelConfig& config) {
    if (length > static_cast<std::size_t>(config.max_positions))
        throw InputError("prompt of " + std::to_string(length) + " positions exceeds the model's budget of " +
                         std::to_string(config.max_positions));
}

void require_nonempty(const std::string& value, const char* field) {
    if (value.find_first_not_of(" \t\r\n") == std::string::npos)
        throw InputError(std::string(field) + " must not be empty");
}

}  // namespace

cv::Mat decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) throw ImageDecodeError("empty image payload");
    const cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8U, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat img;
    try {
        img = cv::imdecode(raw, cv::IMREAD_COLOR);
    } catch (const cv::Exception& e) {
        throw ImageDecodeError(std::string("cannot decode image: ") + e.what());
    }
    if (img.empty()) throw ImageDecodeError("cannot decode image");
    return img;
}

cv::Mat load_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open image " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_image(bytes);
}

cv::Mat preprocess_image(const cv::Mat& image, int size) {
    if (image.empty()) throw InputError("empty image");
    if (size <= 0) throw InputError("image size must be positive");
    const int side = std::min(image.rows, image.cols);
    const cv::Rect crop((image.cols - side) / 2, (image.rows - side) / 2, side, side);
    cv::Mat out;
    const int interp = side > size ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(image(crop), out, cv::Size(size, size), 0, 0, interp);
    return out;
}

std::vector<std::uint8_t> encode_png(const cv::Mat& image) {
    std::vector<std::uint8_t> out;
    if (!cv::imencode(".png", image, out)) throw std::runtime_error("PNG encoding failed");
    return out;
}

void write_png(const cv::Mat& image, const std::filesystem::path& path) {
    const auto bytes = encode_png(image);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// --- encoders ---------------------------------------------------------------

namespace {

void check_geometry(const cv::Mat& image, const VisionGeometry& g) {
    if (!g.enabled()) throw CapabilityError("model has no vision front end");
    if (image.empty() || image.type() != CV_8UC3) throw InputError("expected an 8-bit 3-channel image");
    if (image.rows < g.rows || image.cols < g.cols) throw InputError("image smaller than the patch grid");
}

}  // namespace

StubVisionEncoder::StubVisionEncoder(std::shared_ptr<const ModelWeights> weights, const Tokenizer& tokenizer,
                                     Options options)
    : weights_(std::move(weights)), options_(options) {
    for (const auto& e : kPalette) {
        const auto target = make_token_target(tokenizer, e.name);
        color_ids_[e.name] = target.ids.front();
    }
}

std::optional<std::string> StubVisionEncoder::classify(const cv::Vec3d& bgr) const {
    double best = dist2(bgr, cv::Vec3d(kBackground[0], kBackground[1], kBackground[2]));
    std::optional<std::string> name;
    for (const auto& e : kPalette) {
        const double d = dist2(bgr, cv::Vec3d(e.bgr[0], e.bgr[1], e.bgr[2]));
        if (d < best) {
            best = d;
            name = e.name;
        }
    }
    return name;
}

cv::Vec3b StubVisionEncoder::palette(const std::string& color) {
    for (const auto& e : kPalette)
        if (color == e.name) return e.bgr;
    throw InputError("unknown stub color '" + color + "'");
}

cv::Vec3b StubVisionEncoder::background() { return kBackground; }

Matrix StubVisionEncoder::encode(const cv::Mat& image, const VisionGeometry& g, int d_model) const {
    check_geometry(image, g);
    if (d_model != weights_->config.d_model) throw InputError("encoder and model width differ");
    Matrix out(g.cells(), d_model);
    for (int r = 0; r < g.rows; ++r) {
        for (int c = 0; c < g.cols; ++c) {
            const cv::Rect cell(c * image.cols / g.cols, r * image.rows / g.rows,
                                (c + 1) * image.cols / g.cols - c * image.cols / g.cols,
                                (r + 1) * image.rows / g.rows - r * image.rows / g.rows);
            const cv::Scalar mean = cv::mean(image(cell));
            const auto color = classify(cv::Vec3d(mean[0], mean[1], mean[2]));
            const int row = r * g.cols + c;
            std::mt19937_64 rng(options_.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(row));
            std::normal_distribution<float> noise(0.0f, static_cast<float>(options_.noise));
            for (int i = 0; i < d_model; ++i) out(row, i) = noise(rng);
            if (color) out.row(row) += static_cast<float>(options_.signal) * weights_->embed.row(color_ids_.at(*color));
        }
    }
    return out;
}

Matrix FixedVisionEncoder::encode(const cv::Mat& image, const VisionGeometry& g, int d_model) const {
    check_geometry(image, g);
    if (block_.rows() != g.cells() || block_.cols() != d_model)
        throw InputError("fixed visual block is " + std::to_string(block_.rows()) + "x" +
                         std::to_string(block_.cols()) + ", model expects " + std::to_string(g.cells()) + "x" +
                         std::to_string(d_model));
    return block_;
}

std::string PrecomputedVisionEncoder::key(const cv::Mat& image) {
    const cv::Mat m = image.isContinuous() ? image : image.clone();
    return hex64(fnv1a64({reinterpret_cast<const char*>(m.data), m.total() * m.elemSize()}));
}

Matrix PrecomputedVisionEncoder::encode(const cv::Mat& image, const VisionGeometry& g, int d_model) const {
    check_geometry(image, g);
    const auto path = dir_ / (key(image) + ".f32");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("no precomputed visual block " + path.string());
    Matrix out(g.cells(), d_model);
    const auto bytes = static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(out.size()));
    in.read(reinterpret_cast<char*>(out.data()), bytes);
    if (in.gcount() != bytes || in.peek() != std::char_traits<char>::eof())
        throw InputError("visual block " + path.string() + " has the wrong size");
    return out;
}

// --- prompts ------------------------------------------------------------------

PromptTemplates PromptTemplates::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open prompt templates " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("malformed prompt templates " + path.string() + ": " + e.what());
    }
    PromptTemplates t;
    t.version = j.value("version", t.version);
    t.vqa = j.value("vqa", t.vqa);
    t.tqa = j.value("tqa", t.tqa);
    t.vqa_color_question = j.value("vqa_color_question", t.vqa_color_question);
    t.alt_question = j.value("alt_question", t.alt_question);
    return t;
}

std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& values) {
    std::vector<Slot> ignored;
    return render_tracked(tmpl, values, ignored);
}

std::string capitalize(std::string word) {
    if (!word.empty()) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
    return word;
}

PreparedInput prepare_vqa_input(const cv::Mat& image, const std::string& question, const ModelConfig& config,
                                const Tokenizer& tokenizer, const VisionEncoder& encoder,
                                const PromptTemplates& templates) {
    require_nonempty(question, "question");
    const auto& g = config.vision;
    if (!g.enabled()) throw CapabilityError("model '" + config.id + "' has no vision front end");

    PreparedInput out;
    out.image = preprocess_image(image, g.image_size);

    std::vector<Slot> slots;
    out.text = render_tracked(templates.vqa, {{"question", question}}, slots);
    const auto pieces = tokenizer.encode_with_offsets(out.text);

    if (auto bos = tokenizer.bos_id()) out.tokens.push_back(*bos);
    const int visual_begin = static_cast<int>(out.tokens.size());
    out.tokens.insert(out.tokens.end(), static_cast<std::size_t>(g.cells()), tokenizer.image_id());
    const int text_begin = static_cast<int>(out.tokens.size());
    for (const auto& p : pieces) out.tokens.push_back(p.id);
    check_budget(out.tokens.size(), config);

    const int length = static_cast<int>(out.tokens.size());
    Span question_span = slot_span(slots, "question", pieces, text_begin);
    out.positions = PositionMap::with_visual(length, {visual_begin, text_begin}, g.rows, g.cols, question_span);
    out.visual = encoder.encode(out.image, g, config.d_model);
    if (out.visual->rows() != g.cells() || out.visual->cols() != config.d_model)
        throw InputError("vision encoder returned a block of the wrong shape");
    return out;
}

PreparedInput prepare_vqa_input(std::span<const std::uint8_t> image_bytes, const std::string& question,
                                const ModelConfig& config, const Tokenizer& tokenizer,
                                const VisionEncoder& encoder, const PromptTemplates& templates) {
    require_nonempty(question, "question");
    return prepare_vqa_input(decode_image(image_bytes), question, config, tokenizer, encoder, templates);
}

PreparedInput prepare_tqa_input(const std::string& context_animal, const std::string& color,
                                const std::string& question_animal, const ModelConfig& config,
                                const Tokenizer& tokenizer, const PromptTemplates& templates) {
    require_nonempty(context_animal, "context animal");
    require_nonempty(color, "color");
    require_nonempty(question_animal, "question animal");

    PreparedInput out;
    std::vector<Slot> slots;
    out.text = render_tracked(templates.tqa,
                              {{"Context", capitalize(context_animal)}, {"color", color}, {"animal", question_animal}},
                              slots);
    const auto pieces = tokenizer.encode_with_offsets(out.text);
    if (auto bos = tokenizer.bos_id()) out.tokens.push_back(*bos);
    const int offset = static_cast<int>(out.tokens.size());
    for (const auto& p : pieces) out.tokens.push_back(p.id);
    check_budget(out.tokens.size(), config);

    out.color = slot_span(slots, "color", pieces, offset);
    out.context_animal = slot_span(slots, "Context", pieces, offset);
    out.question_animal = slot_span(slots, "animal", pieces, offset);
    out.positions = PositionMap::text_only(static_cast<int>(out.tokens.size()));
    return out;
}

PreparedInput prepare_text_input(const std::string& context, const std::string& question, const ModelConfig& config,
                                 const Tokenizer& tokenizer, const PromptTemplates& templates) {
    require_nonempty(question, "question");
    PreparedInput out;
    std::vector<Slot> slots;
    const std::string tmpl = context.empty() ? templates.vqa : "{context} " + templates.vqa;
    out.text = render_tracked(tmpl, {{"context", context}, {"question", question}}, slots);
    const auto pieces = tokenizer.encode_with_offsets(out.text);
    if (auto bos = tokenizer.bos_id()) out.tokens.push_back(*bos);
    const int offset = static_cast<int>(out.tokens.size());
    for (const auto& p : pieces) out.tokens.push_back(p.id);
    check_budget(out.tokens.size(), config);
    out.positions = PositionMap::text_only(static_cast<int>(out.tokens.size()),
                                           slot_span(slots, "question", pieces, offset));
    return out;
}

// --- heatmaps -------------------------------------------------------------------

HeatmapRender render_heatmap(const cv::Mat& image, const PatchScoreMap& map, const std::string& method) {
    if (image.empty() || image.type() != CV_8UC3) throw InputError("expected an 8-bit 3-channel image");
    if (map.rows <= 0 || map.cols <= 0 || map.scores.size() != static_cast<std::size_t>(map.rows * map.cols))
        throw InputError("malformed patch score map");
    if (image.rows < map.rows || image.cols < map.cols) throw InputError("patch grid is finer than the image");

    HeatmapRender out;
    out.base = image.clone();
    out.method = method;
    out.alpha = cv::Mat(image.size(), CV_32F);
    for (int y = 0; y < image.rows; ++y) {
        const int r = y * map.rows / image.rows;
        for (int x = 0; x < image.cols; ++x)
            out.alpha.at<float>(y, x) = static_cast<float>(map.display(r, x * map.cols / image.cols));
    }
    // Lowest scores keep a fifth of the brightness so the image stays legible.
    constexpr float kFloor = 0.2f;
    out.composite = cv::Mat(image.size(), CV_8UC3);
    for (int y = 0; y < image.rows; ++y)
        for (int x = 0; x < image.cols; ++x) {
            const float gain = kFloor + (1.0f - kFloor) * out.alpha.at<float>(y, x);
            const auto& px = image.at<cv::Vec3b>(y, x);
            auto& dst = out.composite.at<cv::Vec3b>(y, x);
            for (int ch = 0; ch < 3; ++ch) dst[ch] = cv::saturate_cast<std::uint8_t>(px[ch] * gain);
        }
    return out;
}

}  // namespace patchlens
