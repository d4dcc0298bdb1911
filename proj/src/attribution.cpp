#include "patchlens/attribution.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include "patchlens/errors.hpp"
#include "patchlens/projection.hpp"

namespace patchlens {

HeadId HeadId::parse(std::string_view label) {
    const auto sep = label.find('_');
    if (sep == std::string_view::npos || sep == 0 || sep + 1 >= label.size()) {
        throw InputError("head label '" + std::string(label) + "' is not layer_head");
    }
    HeadId h;
    auto parse_int = [&](std::string_view s, int& out) {
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        if (ec != std::errc() || ptr != s.data() + s.size() || out < 0) {
            throw InputError("head label '" + std::string(label) + "' is not layer_head");
        }
    };
    parse_int(label.substr(0, sep), h.layer);
    parse_int(label.substr(sep + 1), h.head);
    return h;
}

double PatchScoreMap::display(int r, int c) const {
    if (max <= min) return 1.0;
    return std::clamp((at(r, c) - min) / (max - min), 0.0, 1.0);
}

GridCell PatchScoreMap::argmax() const {
    if (scores.empty()) throw InputError("argmax of an empty patch map");
    const auto it = std::max_element(scores.begin(), scores.end());
    const int idx = static_cast<int>(it - scores.begin());
    return {idx / cols, idx % cols};
}

HeadSelection HeadSelection::parse(const std::string& policy, int k) {
    HeadSelection s;
    s.k = k;
    if (policy == "top-k" || policy == "topk" || policy.empty()) {
        s.policy = Policy::top_k;
    } else if (policy == "all") {
        s.policy = Policy::all;
    } else {
        // Comma-separated explicit list: "19_6,20_1".
        s.policy = Policy::explicit_list;
        std::size_t start = 0;
        while (start <= policy.size()) {
            const auto end = policy.find(',', start);
            const auto item = policy.substr(start, end == std::string::npos ? std::string::npos : end - start);
            if (!item.empty()) s.heads.push_back(HeadId::parse(item));
            if (end == std::string::npos) break;
            start = end + 1;
        }
        if (s.heads.empty()) throw InputError("heads policy '" + policy + "' is not top-k|all|<layer_head,...>");
    }
    if (s.policy == Policy::top_k && k < 1) throw InputError("heads policy: k must be >= 1");
    return s;
}

namespace {

void check_target(const Trace& trace, int target) {
    if (target < 0 || target >= trace.weights().config.vocab_size) {
        throw IndexError("target token " + std::to_string(target) + " outside vocabulary");
    }
}

double log_prob(const ModelWeights& w, const VectorD& h, int target) {
    return log_softmax_at(readout_logits(w, h), target);
}

// log p(b | h_T^{l-1}) for every layer, computed once per (trace, target).
std::vector<double> baselines(const Trace& trace, int target) {
    std::vector<double> base(static_cast<std::size_t>(trace.n_layers()));
    for (int l = 0; l < trace.n_layers(); ++l) {
        base[static_cast<std::size_t>(l)] = log_prob(trace.weights(), trace.layer_input_d(l, trace.length() - 1), target);
    }
    return base;
}

double increase_with_base(const Trace& trace, int layer, const VectorD& contribution, int target, double base) {
    const VectorD h = trace.layer_input_d(layer, trace.length() - 1);
    return log_prob(trace.weights(), h + contribution, target) - base;
}

std::vector<double> position_scores_for(const Trace& trace, HeadId head, int target, double base) {
    std::vector<double> out(static_cast<std::size_t>(trace.length()), 0.0);
    const auto alpha = trace.attention(head);
    for (int p = 0; p < trace.length(); ++p) {
        if (alpha[static_cast<std::size_t>(p)] == 0.0f) continue;
        out[static_cast<std::size_t>(p)] =
            increase_with_base(trace, head.layer, position_contribution(trace, head, p), target, base);
    }
    return out;
}

std::vector<HeadId> resolve_heads(const Trace& trace, int target, const HeadSelection& sel) {
    switch (sel.policy) {
        case HeadSelection::Policy::all: {
            std::vector<HeadId> all;
            for (int l = 0; l < trace.n_layers(); ++l)
                for (int j = 0; j < trace.n_heads(); ++j) all.push_back({l, j});
            return all;
        }
        case HeadSelection::Policy::explicit_list:
            for (const auto& h : sel.heads) trace.check_head(h);
            return sel.heads;
        case HeadSelection::Policy::top_k:
            break;
    }
    return top_heads(head_scores(trace, target), sel.k);
}

PatchScoreMap fold(const Trace& trace, const std::vector<double>& per_position) {
    const auto& pm = trace.positions();
    PatchScoreMap map;
    map.rows = pm.rows();
    map.cols = pm.cols();
    map.scores.assign(static_cast<std::size_t>(map.rows * map.cols), 0.0);
    for (int p = pm.visual().begin; p < pm.visual().end; ++p) {
        const GridCell c = pm.cell_of(p);
        map.scores[static_cast<std::size_t>(c.row * map.cols + c.col)] = per_position[static_cast<std::size_t>(p)];
    }
    const auto [mn, mx] = std::minmax_element(map.scores.begin(), map.scores.end());
    map.min = *mn;
    map.max = *mx;
    return map;
}

void require_visual(const Trace& trace) {
    if (!trace.positions().has_visual()) throw InputError("trace has no visual span");
}

}  // namespace

double log_prob_increase_of(const Trace& trace, int layer, const VectorD& contribution, int target) {
    check_target(trace, target);
    if (layer < 0 || layer >= trace.n_layers()) throw IndexError("layer " + std::to_string(layer) + " out of range");
    if (contribution.size() != trace.d_model()) throw InputError("contribution has wrong dimension");
    const VectorD h = trace.layer_input_d(layer, trace.length() - 1);
    return log_prob(trace.weights(), h + contribution, target) - log_prob(trace.weights(), h, target);
}

double log_prob_increase(const Trace& trace, HeadId head, int target) {
    return log_prob_increase_of(trace, head.layer, head_output(trace, head), target);
}

double position_log_prob_increase(const Trace& trace, HeadId head, int target, int position) {
    return log_prob_increase_of(trace, head.layer, position_contribution(trace, head, position), target);
}

double logit_minus_from_logits(const VectorD& logits, int b1, int b2) {
    if (b1 < 0 || b2 < 0 || b1 >= logits.size() || b2 >= logits.size()) throw IndexError("token outside vocabulary");
    if (b1 == b2) return 0.0;
    return logits[b1] - logits[b2];
}

double log_prob_minus_from_logits(const VectorD& logits, int b1, int b2) {
    if (b1 == b2) return 0.0;
    return log_softmax_at(logits, b1) - log_softmax_at(logits, b2);
}

double logit_minus(const ModelWeights& w, const VectorD& vector, int b1, int b2) {
    return logit_minus_from_logits(readout_logits(w, vector), b1, b2);
}

HeadGrid head_scores(const Trace& trace, int target) {
    check_target(trace, target);
    const auto base = baselines(trace, target);
    HeadGrid s(trace.n_layers(), trace.n_heads());
    for (int l = 0; l < trace.n_layers(); ++l) {
        for (int j = 0; j < trace.n_heads(); ++j) {
            s(l, j) = increase_with_base(trace, l, head_output(trace, {l, j}), target, base[static_cast<std::size_t>(l)]);
        }
    }
    return s;
}

HeadGrid normalize_profile(const HeadGrid& scores) {
    HeadGrid p = scores.cwiseMax(0.0);
    const double total = p.sum();
    if (!(total > 0.0)) throw InputError("no positively contributing heads");
    p /= total;
    return p;
}

std::vector<HeadId> top_heads(const HeadGrid& grid, int k) {
    const int n = static_cast<int>(grid.size());
    if (k < 1) throw InputError("top-k: k must be >= 1");
    std::vector<HeadId> heads;
    heads.reserve(static_cast<std::size_t>(n));
    for (int l = 0; l < grid.rows(); ++l)
        for (int j = 0; j < grid.cols(); ++j) heads.push_back({l, j});
    std::stable_sort(heads.begin(), heads.end(), [&](HeadId a, HeadId b) {
        const double sa = grid(a.layer, a.head);
        const double sb = grid(b.layer, b.head);
        if (sa != sb) return sa > sb;
        return a < b;
    });
    heads.resize(static_cast<std::size_t>(std::min(k, n)));
    return heads;
}

AttributionResult attribute(const Trace& trace, int target, int top_k) {
    AttributionResult r;
    r.target = target;
    r.scores = head_scores(trace, target);
    r.top_heads = top_heads(r.scores, top_k);
    // A trace where nothing helps the target still gets an all-zero profile.
    r.profile = (r.scores.array() > 0.0).any() ? normalize_profile(r.scores) : HeadGrid::Zero(r.scores.rows(), r.scores.cols());
    const auto base = baselines(trace, target);
    for (const auto& h : r.top_heads) {
        r.position_scores.emplace(h, position_scores_for(trace, h, target, base[static_cast<std::size_t>(h.layer)]));
    }
    return r;
}

AttributionResult head_importance_profile(std::span<const std::pair<const Trace*, int>> cases, int top_k) {
    if (cases.empty()) throw InputError("head importance profile: no cases");
    const Trace& first = *cases.front().first;
    HeadGrid sum = HeadGrid::Zero(first.n_layers(), first.n_heads());
    for (const auto& [trace, target] : cases) {
        if (trace->n_layers() != first.n_layers() || trace->n_heads() != first.n_heads()) {
            throw InputError("head importance profile: traces come from different model shapes");
        }
        sum += head_scores(*trace, target);
    }
    AttributionResult r;
    r.target = cases.front().second;
    r.case_count = cases.size();
    r.scores = sum / static_cast<double>(cases.size());
    r.profile = normalize_profile(r.scores);
    r.top_heads = top_heads(r.scores, top_k);
    return r;
}

int top_head_overlap(const HeadGrid& a, const HeadGrid& b, int k) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw InputError("top-head overlap: profile dims differ");
    if (k < 1 || k > a.size()) {
        throw InputError("top-head overlap: k=" + std::to_string(k) + " outside [1, " + std::to_string(a.size()) + "]");
    }
    auto ta = top_heads(a, k);
    auto tb = top_heads(b, k);
    std::sort(ta.begin(), ta.end());
    std::sort(tb.begin(), tb.end());
    std::vector<HeadId> both;
    std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(both));
    return static_cast<int>(both.size());
}

PatchScoreMap patch_score_map(const Trace& trace, int target, const HeadSelection& selection) {
    require_visual(trace);
    check_target(trace, target);
    const auto heads = resolve_heads(trace, target, selection);
    const auto base = baselines(trace, target);
    const auto& vis = trace.positions().visual();
    std::vector<double> per_position(static_cast<std::size_t>(trace.length()), 0.0);
    for (const auto& h : heads) {
        const auto alpha = trace.attention(h);
        for (int p = vis.begin; p < vis.end; ++p) {
            if (alpha[static_cast<std::size_t>(p)] == 0.0f) continue;
            per_position[static_cast<std::size_t>(p)] += increase_with_base(
                trace, h.layer, position_contribution(trace, h, p), target, base[static_cast<std::size_t>(h.layer)]);
        }
    }
    return fold(trace, per_position);
}

PatchScoreMap average_attention_map(const Trace& trace) {
    require_visual(trace);
    std::vector<double> mean(static_cast<std::size_t>(trace.length()), 0.0);
    const double n = static_cast<double>(trace.n_layers()) * trace.n_heads();
    for (int l = 0; l < trace.n_layers(); ++l)
        for (int j = 0; j < trace.n_heads(); ++j) {
            const auto alpha = trace.attention({l, j});
            for (int p = 0; p < trace.length(); ++p) mean[static_cast<std::size_t>(p)] += alpha[static_cast<std::size_t>(p)] / n;
        }
    return fold(trace, mean);
}

void share_scale(PatchScoreMap& a, PatchScoreMap& b) {
    const double mn = std::min(a.min, b.min);
    const double mx = std::max(a.max, b.max);
    a.min = b.min = mn;
    a.max = b.max = mx;
}

}  // namespace patchlens
