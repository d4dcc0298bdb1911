#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "patchlens/model.hpp"
#include "patchlens/trace.hpp"

namespace fixtures {

inline std::shared_ptr<patchlens::ModelHandle> toy_handle(std::uint64_t seed) {
    return std::make_shared<patchlens::ModelHandle>(patchlens::make_random_model(patchlens::toy_config(), seed));
}

inline std::shared_ptr<const patchlens::Trace> toy_trace(const patchlens::ModelHandle& model,
                                                        std::vector<int> tokens) {
    const int n = static_cast<int>(tokens.size());
    return patchlens::run_traced(model, {std::move(tokens), std::nullopt}, patchlens::PositionMap::text_only(n));
}

}  // namespace fixtures
