#pragma once

#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "patchlens/head_id.hpp"
#include "patchlens/model.hpp"
#include "patchlens/trace.hpp"

namespace patchlens {

// (L+1) x H grid of per-head numbers, row = layer.
using HeadGrid = MatrixD;

struct AttributionResult {
    int target = 0;
    HeadGrid scores;   // S, raw log-probability increases
    HeadGrid profile;  // clamp(S, 0) / sum, a probability vector over heads
    std::map<HeadId, std::vector<double>> position_scores;  // per selected head, length T
    std::vector<HeadId> top_heads;  // by raw S descending, ties by (layer, head)
    std::size_t case_count = 1;

    double share(HeadId h) const { return profile(h.layer, h.head); }
};

struct PatchScoreMap {
    int rows = 0;
    int cols = 0;
    std::vector<double> scores;  // row-major
    double min = 0.0;            // display scaling range
    double max = 0.0;

    double at(int r, int c) const { return scores[static_cast<std::size_t>(r * cols + c)]; }
    // Score mapped into [0, 1] using [min, max]; a degenerate range maps to 1.
    double display(int r, int c) const;
    GridCell argmax() const;
};

// Head selection for patch maps.
struct HeadSelection {
    enum class Policy { top_k, all, explicit_list };
    Policy policy = Policy::top_k;
    int k = 10;
    std::vector<HeadId> heads;

    static HeadSelection parse(const std::string& policy, int k);
};

// log p(b | h + contribution) - log p(b | h) with h = h_T^{layer-1}, p read
// through the final normalization and E_u.
double log_prob_increase_of(const Trace& trace, int layer, const VectorD& contribution, int target);

double log_prob_increase(const Trace& trace, HeadId head, int target);
double position_log_prob_increase(const Trace& trace, HeadId head, int target, int position);

// log p(b1 | v) - log p(b2 | v) under the same readout; equals the raw logit gap.
double logit_minus(const ModelWeights& w, const VectorD& vector, int b1, int b2);
// Same quantity from logits directly: the two forms, log-prob gap and raw gap.
double logit_minus_from_logits(const VectorD& logits, int b1, int b2);
double log_prob_minus_from_logits(const VectorD& logits, int b1, int b2);

// S for every head.
HeadGrid head_scores(const Trace& trace, int target);

// Clamp negatives to zero and divide by the positive sum. Throws InputError
// "no positively contributing heads" when nothing is positive.
HeadGrid normalize_profile(const HeadGrid& scores);

// Top-k heads of a grid, descending, ties by (layer, head) ascending.
std::vector<HeadId> top_heads(const HeadGrid& grid, int k);

// Full single-trace attribution: S, profile, top-k, and per-position scores
// for the top-k heads.
AttributionResult attribute(const Trace& trace, int target, int top_k = 10);

// Mean S over cases, then normalized.
AttributionResult head_importance_profile(std::span<const std::pair<const Trace*, int>> cases, int top_k = 10);

// |top_k(a) ∩ top_k(b)| computed on the profiles.
int top_head_overlap(const HeadGrid& a, const HeadGrid& b, int k);

// Per-visual-position sum of position_log_prob_increase over the selected
// heads, folded into the patch grid.
PatchScoreMap patch_score_map(const Trace& trace, int target, const HeadSelection& heads = {});

// Mean attention of the last query over every layer and head, restricted to
// the visual span.
PatchScoreMap average_attention_map(const Trace& trace);

// Rescale two maps to one shared [min, max] range for side-by-side display.
void share_scale(PatchScoreMap& a, PatchScoreMap& b);

}  // namespace patchlens
