#pragma once

#include <span>
#include <string>
#include <vector>

#include "patchlens/model.hpp"
#include "patchlens/tokenizer.hpp"

namespace patchlens {

// Readout helpers shared by attribution and projection. All in double precision.

// Final normalization of a residual-stream vector (the norm applied before E_u).
VectorD final_normalize(const ModelWeights& w, const VectorD& h);
// E_u * final_normalize(h): next-token logits as the model computes them.
VectorD readout_logits(const ModelWeights& w, const VectorD& h);
// Raw M * v without normalization, M = E_u or E.
VectorD raw_logits(const Matrix& m, const VectorD& v);
VectorD log_softmax(const VectorD& logits);
double log_softmax_at(const VectorD& logits, int token);

enum class ProjectionSpace { unembedding, embedding };
std::string to_string(ProjectionSpace space);
ProjectionSpace parse_space(const std::string& s);

struct RankedToken {
    int id = 0;
    double logit = 0.0;
    double probability = 0.0;
};

// Vocabulary ranking of one hidden vector, descending by logit (ties by id).
class TokenProjection {
public:
    TokenProjection(ProjectionSpace space, std::string provenance, const VectorD& logits);

    ProjectionSpace space() const { return space_; }
    const std::string& provenance() const { return provenance_; }
    const std::vector<RankedToken>& ranked() const { return ranked_; }
    // 1-based rank of a token id.
    int rank_of_id(int id) const;
    std::span<const RankedToken> top(std::size_t k) const;

private:
    ProjectionSpace space_;
    std::string provenance_;
    std::vector<RankedToken> ranked_;
    std::vector<int> rank_;  // id -> rank
};

// A word and the token ids accepted as that word in a ranking.
struct TokenTarget {
    std::string word;
    std::vector<int> ids;
};

// Accepts the first sub-token of " word", "word", " Word" and "Word".
// Throws InputError if no variant produces a known token.
TokenTarget make_token_target(const Tokenizer& tok, const std::string& word);

// Unembedding projections apply the final normalization (how the model reads
// its own residual stream); embedding projections use E directly.
TokenProjection project(const ModelWeights& w, const VectorD& vector, ProjectionSpace space,
                        std::string provenance = {});

// Best (minimum) rank among the target's accepted ids.
int rank_of(const TokenProjection& projection, const TokenTarget& target);

// Mean over projections of 1 / rank_of.
double mrr(std::span<const TokenProjection> projections, const TokenTarget& target);
// Same statistic from precomputed ranks.
double mrr_from_ranks(std::span<const int> ranks);

}  // namespace patchlens
