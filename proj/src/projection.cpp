#include "patchlens/projection.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "patchlens/errors.hpp"

namespace patchlens {

VectorD final_normalize(const ModelWeights& w, const VectorD& h) {
    if (h.size() != w.config.d_model) {
        throw InputError("vector has dimension " + std::to_string(h.size()) + ", model expects " +
                         std::to_string(w.config.d_model));
    }
    return rms_norm(h, w.final_norm, static_cast<double>(w.config.rms_eps));
}

VectorD raw_logits(const Matrix& m, const VectorD& v) {
    if (v.size() != m.cols()) {
        throw InputError("vector has dimension " + std::to_string(v.size()) + ", matrix expects " +
                         std::to_string(m.cols()));
    }
    VectorD out(m.rows());
    for (Eigen::Index b = 0; b < m.rows(); ++b) {
        const float* row = m.row(b).data();
        double acc = 0.0;
        for (Eigen::Index i = 0; i < m.cols(); ++i) acc += static_cast<double>(row[i]) * v[i];
        out[b] = acc;
    }
    return out;
}

VectorD readout_logits(const ModelWeights& w, const VectorD& h) { return raw_logits(w.unembed, final_normalize(w, h)); }

VectorD log_softmax(const VectorD& logits) {
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    return (logits.array() - lse).matrix();
}

double log_softmax_at(const VectorD& logits, int token) {
    if (token < 0 || token >= logits.size()) throw IndexError("token id " + std::to_string(token) + " outside vocabulary");
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    return logits[token] - lse;
}

std::string to_string(ProjectionSpace space) {
    return space == ProjectionSpace::unembedding ? "unembedding" : "embedding";
}

ProjectionSpace parse_space(const std::string& s) {
    if (s == "unembedding") return ProjectionSpace::unembedding;
    if (s == "embedding") return ProjectionSpace::embedding;
    throw InputError("unknown projection space '" + s + "' (expected unembedding|embedding)");
}

TokenProjection::TokenProjection(ProjectionSpace space, std::string provenance, const VectorD& logits)
    : space_(space), provenance_(std::move(provenance)) {
    const auto n = static_cast<std::size_t>(logits.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;
    });
    const VectorD lp = log_softmax(logits);
    ranked_.reserve(n);
    rank_.assign(n, 0);
    for (std::size_t r = 0; r < n; ++r) {
        const int id = order[r];
        ranked_.push_back({id, logits[id], std::exp(lp[id])});
        rank_[static_cast<std::size_t>(id)] = static_cast<int>(r) + 1;
    }
}

int TokenProjection::rank_of_id(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= rank_.size()) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return rank_[static_cast<std::size_t>(id)];
}

std::span<const RankedToken> TokenProjection::top(std::size_t k) const {
    return {ranked_.data(), std::min(k, ranked_.size())};
}

TokenTarget make_token_target(const Tokenizer& tok, const std::string& word) {
    if (word.empty()) throw InputError("token target: empty word");
    std::string cap = word;
    cap[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(cap[0])));
    TokenTarget target{word, {}};
    for (const std::string& variant : {" " + word, word, " " + cap, cap}) {
        const auto ids = tok.encode_fragment(variant);
        if (ids.empty() || ids.front() == tok.unk_id()) continue;
        // A bare space-mark piece is not evidence of the word.
        if (tok.decode(ids.front()) == " ") continue;
        if (std::find(target.ids.begin(), target.ids.end(), ids.front()) == target.ids.end()) {
            target.ids.push_back(ids.front());
        }
    }
    if (target.ids.empty()) throw InputError("token target: no token for word '" + word + "'");
    return target;
}

TokenProjection project(const ModelWeights& w, const VectorD& vector, ProjectionSpace space, std::string provenance) {
    if (vector.size() != w.config.d_model) {
        throw InputError("projection: vector dimension " + std::to_string(vector.size()) + " != d_model " +
                         std::to_string(w.config.d_model));
    }
    if (space == ProjectionSpace::unembedding) {
        return TokenProjection(space, std::move(provenance), readout_logits(w, vector));
    }
    return TokenProjection(space, std::move(provenance), raw_logits(w.embed, vector));
}

int rank_of(const TokenProjection& projection, const TokenTarget& target) {
    if (target.ids.empty()) throw InputError("token target '" + target.word + "' has no accepted ids");
    int best = std::numeric_limits<int>::max();
    for (int id : target.ids) best = std::min(best, projection.rank_of_id(id));
    return best;
}

double mrr(std::span<const TokenProjection> projections, const TokenTarget& target) {
    if (target.ids.empty()) throw InputError("token target '" + target.word + "' has no accepted ids");
    if (projections.empty()) throw InputError("mrr: empty projection list");
    std::vector<int> ranks;
    ranks.reserve(projections.size());
    for (const auto& p : projections) ranks.push_back(rank_of(p, target));
    return mrr_from_ranks(ranks);
}

double mrr_from_ranks(std::span<const int> ranks) {
    if (ranks.empty()) throw InputError("mrr: no ranks");
    double sum = 0.0;
    for (int r : ranks) {
        if (r < 1) throw InputError("mrr: rank must be >= 1");
        sum += 1.0 / r;
    }
    return sum / static_cast<double>(ranks.size());
}

}  // namespace patchlens
