#pragma once

// Straight-line reference computations used as test oracles. Everything is
// explicit loops in double precision over the raw weight arrays; nothing here
// calls into the library's attention, readout or projection code.

#include <utility>
#include <vector>

#include "patchlens/model.hpp"
#include "patchlens/trace.hpp"

namespace oracle {

using Vec = std::vector<double>;

Vec rms_norm(const Vec& x, const patchlens::Vector& gain, double eps);

// Recomputes the last query's attention row for one head from the captured
// layer inputs.
Vec attention_row(const patchlens::Trace& trace, patchlens::HeadId head);

// sum_p alpha_p O_j (V_j norm(h_p) + b_v), with alpha from attention_row.
Vec head_output(const patchlens::Trace& trace, patchlens::HeadId head);
Vec position_contribution(const patchlens::Trace& trace, patchlens::HeadId head, int position);

// normalize -> unembed -> log-softmax, one token.
double log_prob(const patchlens::ModelWeights& w, const Vec& h, int token);
double log_prob_increase(const patchlens::Trace& trace, int layer, const Vec& contribution, int token);

// Brute-force ranking: all B inner products, sorted (logit desc, id asc).
// Unembedding space applies the final norm first.
std::vector<std::pair<int, double>> ranking(const patchlens::ModelWeights& w, const Vec& v, bool unembedding);

Vec layer_input(const patchlens::Trace& trace, int layer, int position);

// Independent full forward pass from token ids: returns last-position logits.
Vec forward_logits(const patchlens::ModelWeights& w, const std::vector<int>& tokens);

double max_abs_diff(const Vec& a, const Vec& b);
double max_abs_diff(const Vec& a, const patchlens::VectorD& b);

}  // namespace oracle
