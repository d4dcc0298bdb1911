#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchlens/bundle.hpp"
#include "patchlens/model.hpp"

namespace patchlens {

// Read-only safetensors file. F32, F16 and BF16 tensors are widened to float.
class SafetensorsFile {
public:
    explicit SafetensorsFile(const std::filesystem::path& path);

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    std::vector<std::string> names() const;
    const std::vector<std::int64_t>& shape(const std::string& name) const;
    const std::string& dtype(const std::string& name) const;
    std::vector<float> read(const std::string& name) const;

private:
    struct Entry {
        std::string dtype;
        std::vector<std::int64_t> shape;
        std::uint64_t begin = 0;
        std::uint64_t end = 0;
    };
    const Entry& entry(const std::string& name) const;

    std::filesystem::path path_;
    std::uint64_t data_offset_ = 0;
    std::map<std::string, Entry> index_;
};

struct NamedTensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;
};

// Writes F32 tensors.
void write_safetensors(const std::filesystem::path& path, const std::map<std::string, NamedTensor>& tensors);

// Maps a Hugging Face config.json (llama, mistral or qwen2 families, or the
// text_config of a llava wrapper) onto ModelConfig. The optional
// "patchlens_vision" object {rows, cols, image_size} sets the patch grid;
// a llava vision_config derives it from image_size / patch_size.
// Throws CapabilityError for unsupported architectures.
ModelConfig config_from_hf(const nlohmann::json& config, const std::string& id);

// Loads config.json + model.safetensors from a checkpoint directory.
std::shared_ptr<ModelWeights> load_checkpoint(const std::filesystem::path& dir);

// Writes config.json + model.safetensors with Hugging Face llama tensor names.
void save_checkpoint(const ModelWeights& weights, const std::filesystem::path& dir);

// Checkpoint plus tokenizer.json. Vision encoder: <dir>/visual_blocks when
// present, else the stub encoder when the vocabulary has the color words,
// else none.
ModelBundle load_checkpoint_bundle(const std::filesystem::path& dir, std::size_t queue_capacity = 64);

}  // namespace patchlens
