#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "patchlens/attribution.hpp"
#include "patchlens/model.hpp"
#include "patchlens/position_map.hpp"
#include "patchlens/tokenizer.hpp"
#include "patchlens/trace.hpp"

namespace patchlens {

// Images are 8-bit, 3-channel, BGR (OpenCV order) throughout.

// Throws ImageDecodeError for bytes OpenCV cannot decode.
cv::Mat decode_image(std::span<const std::uint8_t> bytes);
cv::Mat load_image(const std::filesystem::path& path);

// Center crop to a square, then resize to size x size. This is the image the
// model sees and the one heatmaps are drawn over.
cv::Mat preprocess_image(const cv::Mat& image, int size);

std::vector<std::uint8_t> encode_png(const cv::Mat& image);
void write_png(const cv::Mat& image, const std::filesystem::path& path);

// Image -> (rows*cols) x d block of visual embeddings, row-major over the
// patch grid. Takes the preprocessed image.
class VisionEncoder {
public:
    virtual ~VisionEncoder() = default;
    virtual std::string id() const = 0;
    virtual Matrix encode(const cv::Mat& image, const VisionGeometry& geometry, int d_model) const = 0;
};

// Deterministic encoder for desk-scale runs. Each patch's mean color is
// matched to the nearest named color; the patch embedding is that color
// word's input embedding scaled by `signal`, plus seeded noise. Patches
// closer to background() than to any color carry noise only.
class StubVisionEncoder : public VisionEncoder {
public:
    struct Options {
        double signal = 1.0;
        double noise = 0.05;
        std::uint64_t seed = 0;
    };

    StubVisionEncoder(std::shared_ptr<const ModelWeights> weights, const Tokenizer& tokenizer, Options options);
    StubVisionEncoder(std::shared_ptr<const ModelWeights> weights, const Tokenizer& tokenizer)
        : StubVisionEncoder(std::move(weights), tokenizer, Options{}) {}

    std::string id() const override { return "stub"; }
    Matrix encode(const cv::Mat& image, const VisionGeometry& geometry, int d_model) const override;

    // Named color nearest to a BGR mean, or nullopt for background.
    std::optional<std::string> classify(const cv::Vec3d& bgr) const;

    // BGR value the stub associates with a color name. Throws InputError for
    // unknown names.
    static cv::Vec3b palette(const std::string& color);
    static cv::Vec3b background();

private:
    std::shared_ptr<const ModelWeights> weights_;
    std::map<std::string, int> color_ids_;
    Options options_;
};

// Returns the same block for every image (after a shape check).
class FixedVisionEncoder : public VisionEncoder {
public:
    explicit FixedVisionEncoder(Matrix block) : block_(std::move(block)) {}
    std::string id() const override { return "fixed"; }
    Matrix encode(const cv::Mat& image, const VisionGeometry& geometry, int d_model) const override;

private:
    Matrix block_;
};

// Reads blocks produced offline by the real vision tower and projector:
// <dir>/<fnv1a64 of preprocessed pixels, 16 hex digits>.f32, little-endian
// float32, (rows*cols) x d row-major.
class PrecomputedVisionEncoder : public VisionEncoder {
public:
    explicit PrecomputedVisionEncoder(std::filesystem::path dir) : dir_(std::move(dir)) {}
    std::string id() const override { return "precomputed"; }
    Matrix encode(const cv::Mat& image, const VisionGeometry& geometry, int d_model) const override;

    static std::string key(const cv::Mat& image);

private:
    std::filesystem::path dir_;
};

// Versioned prompt templates. Placeholders: {question}; {Context} (context
// animal, capitalized), {color}, {animal} (question animal).
struct PromptTemplates {
    std::string version = "prompts-v1";
    std::string vqa = "Q: {question} A:";
    std::string tqa = "{Context} is {color}. Q: What is the color of the {animal}? A:";
    std::string vqa_color_question = "What is the color of the {animal}?";
    std::string alt_question = "What is the animal in this picture?";

    static PromptTemplates from_json_file(const std::filesystem::path& path);
};

// Replaces every {name} with its value. Unknown placeholders are left as is.
std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& values);

struct PreparedInput {
    std::vector<int> tokens;
    std::optional<Matrix> visual;
    PositionMap positions;
    cv::Mat image;      // preprocessed image, empty for text-only input
    std::string text;   // rendered prompt after the visual span
    // Token spans of the template slots; empty when a slot is absent.
    Span color;
    Span context_animal;
    Span question_animal;

    ModelInput model_input() const { return {tokens, visual}; }
};

// [bos] [rows*cols visual placeholders] [vqa template with the question].
// Throws InputError for an empty question or a prompt longer than the
// model's position budget.
PreparedInput prepare_vqa_input(const cv::Mat& image, const std::string& question, const ModelConfig& config,
                                const Tokenizer& tokenizer, const VisionEncoder& encoder,
                                const PromptTemplates& templates = {});
PreparedInput prepare_vqa_input(std::span<const std::uint8_t> image_bytes, const std::string& question,
                                const ModelConfig& config, const Tokenizer& tokenizer,
                                const VisionEncoder& encoder, const PromptTemplates& templates = {});

// [bos] [tqa template]. The S1 variant passes a different context animal,
// S2 a different question animal.
PreparedInput prepare_tqa_input(const std::string& context_animal, const std::string& color,
                                const std::string& question_animal, const ModelConfig& config,
                                const Tokenizer& tokenizer, const PromptTemplates& templates = {});

// [bos] [context] [vqa template with the question]: the text-only analogue of
// prepare_vqa_input. An empty context is allowed.
PreparedInput prepare_text_input(const std::string& context, const std::string& question, const ModelConfig& config,
                                 const Tokenizer& tokenizer, const PromptTemplates& templates = {});

std::string capitalize(std::string word);

struct HeatmapRender {
    cv::Mat base;       // preprocessed image
    cv::Mat alpha;      // CV_32F, image size, display value per pixel in [0, 1]
    cv::Mat composite;  // base darkened by (1 - alpha); lighter means higher
    std::string method; // "logprob" or "avg-attention"
};

// Per-map min-max scaling unless the map's range was set by share_scale.
// Throws InputError if the grid does not tile the image.
HeatmapRender render_heatmap(const cv::Mat& image, const PatchScoreMap& map, const std::string& method);

}  // namespace patchlens
