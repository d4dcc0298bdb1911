#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "patchlens/head_id.hpp"
#include "patchlens/model.hpp"
#include "patchlens/position_map.hpp"

namespace patchlens {

enum class CapturePrecision { f32, f16 };

// Tolerances for the decomposition identities. Half-precision capture relaxes
// every bound by 10x.
struct Tolerances {
    double residual = 1e-4;       // h^l vs h^{l-1} + A^l + F^l
    double head_sum = 1e-4;       // sum of heads vs A^l
    double position_sum = 1e-5;   // sum of positions vs head output
    double attention_row = 1e-5;  // softmax row sums

    static Tolerances for_precision(CapturePrecision p);
};

struct TraceOptions {
    bool full_attention = false;  // capture every query row, not just the last
    bool eager_values = false;    // precompute all value-output vectors
    CapturePrecision precision = CapturePrecision::f32;
};

// Token sequence plus an optional visual embedding block occupying the
// position map's visual span.
struct ModelInput {
    std::vector<int> tokens;
    std::optional<Matrix> visual;
};

// Immutable record of one forward pass. Layer inputs are kept so that
// value-output vectors O_j (V_j norm(h_p) + b_v) can be rebuilt on demand.
class Trace {
public:
    int length() const { return length_; }
    int n_layers() const { return n_layers_; }
    int n_heads() const { return n_heads_; }
    int d_model() const { return d_model_; }
    const std::vector<int>& tokens() const { return tokens_; }
    const PositionMap& positions() const { return positions_; }
    const ModelWeights& weights() const { return *weights_; }
    const std::shared_ptr<const ModelWeights>& shared_weights() const { return weights_; }
    const TraceOptions& options() const { return options_; }
    bool has_full_attention() const { return options_.full_attention; }

    // Residual stream after `layer` (layer == -1 gives the embeddings).
    std::span<const float> residual(int layer, int position) const;
    // h_p^{l-1}: the input of `layer` at `position`.
    std::span<const float> layer_input(int layer, int position) const { return residual(layer - 1, position); }
    VectorD layer_input_d(int layer, int position) const;

    // Attention row of the last query for (layer, head), length T.
    std::span<const float> attention(HeadId head) const;
    // Attention row of an arbitrary query; needs full capture unless query is last.
    std::span<const float> attention(HeadId head, int query) const;

    std::span<const float> attn_out(int layer) const;  // A_T^l
    std::span<const float> ffn_out(int layer) const;   // F_T^l
    const Vector& logits() const { return logits_; }
    int predicted_token() const;

    // O_j (V_j norm(h_p^{l-1}) + b_v): the unweighted value-output vector.
    VectorD value_output(HeadId head, int position) const;

    void check_head(HeadId head) const;
    void check_position(int position) const;

private:
    friend class TraceBuilder;
    Trace() = default;

    std::shared_ptr<const ModelWeights> weights_;
    TraceOptions options_;
    PositionMap positions_;
    std::vector<int> tokens_;
    int length_ = 0;
    int n_layers_ = 0;
    int n_heads_ = 0;
    int d_model_ = 0;
    std::vector<float> residuals_;  // (L+2) x T x d
    std::vector<float> attention_;  // (L+1) x H x {1|T} x T
    std::vector<float> attn_out_;   // (L+1) x d
    std::vector<float> ffn_out_;    // (L+1) x d
    Vector logits_;
    std::vector<double> value_cache_;  // (L+1) x H x T x d when eager
};

// Assembles a Trace from captured arrays (used by the engine and the archive reader).
class TraceBuilder {
public:
    static std::shared_ptr<const Trace> build(std::shared_ptr<const ModelWeights> weights,
                                              std::vector<int> tokens, PositionMap positions,
                                              TraceOptions options, ForwardCapture&& capture,
                                              bool apply_precision = true);
};

// Executes exactly one instrumented forward pass through the model's run queue.
std::shared_ptr<const Trace> run_traced(const ModelHandle& model, const ModelInput& input,
                                        const PositionMap& positions, const TraceOptions& options = {});

// o_{j,T}^l = sum_p alpha_p * value_output(p).
VectorD head_output(const Trace& trace, HeadId head);

// alpha_{j,query,p} * value_output(p); query defaults to the last position.
VectorD position_contribution(const Trace& trace, HeadId head, int position,
                              std::optional<int> query = std::nullopt);

// trace-format-v1 archive.
void save_trace(const Trace& trace, const std::filesystem::path& path, const std::string& model_id);
std::shared_ptr<const Trace> load_trace(const std::filesystem::path& path,
                                        std::shared_ptr<const ModelWeights> weights);

}  // namespace patchlens
