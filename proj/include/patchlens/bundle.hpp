#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "patchlens/mm_adapter.hpp"
#include "patchlens/model.hpp"
#include "patchlens/tokenizer.hpp"

namespace patchlens {

// Everything needed to run one model end to end.
struct ModelBundle {
    std::string id;
    std::shared_ptr<ModelHandle> model;
    std::shared_ptr<const Tokenizer> tokenizer;
    std::shared_ptr<const VisionEncoder> encoder;  // null for text-only models
    PromptTemplates templates;
};

// Seeded toy model with the toy vocabulary and the stub vision encoder.
ModelBundle toy_bundle(std::uint64_t seed = 0, std::size_t queue_capacity = 64);

}  // namespace patchlens
