#pragma once

#include <compare>
#include <string>
#include <string_view>

namespace patchlens {

// (layer, head) coordinate, displayed as "layer_head" (e.g. "19_6").
struct HeadId {
    int layer = 0;
    int head = 0;

    std::string label() const { return std::to_string(layer) + "_" + std::to_string(head); }
    // Throws InputError on anything that is not "<int>_<int>".
    static HeadId parse(std::string_view label);

    auto operator<=>(const HeadId&) const = default;
};

}  // namespace patchlens
