#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace patchlens {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXf;
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorD = Eigen::VectorXd;

// Patch grid geometry of the vision front end. rows == 0 means text-only model.
struct VisionGeometry {
    int rows = 0;
    int cols = 0;
    int image_size = 0;  // square side in pixels after preprocessing

    int cells() const { return rows * cols; }
    bool enabled() const { return rows > 0 && cols > 0; }
};

// Llama-family decoder: pre-RMSNorm blocks, rotary positions (rotate-half
// layout), optional grouped KV heads, SwiGLU FFN (ffn_hidden == 0 drops the FFN).
struct ModelConfig {
    std::string id = "model";
    int n_layers = 1;     // L + 1
    int n_heads = 1;      // H
    int n_kv_heads = 1;
    int d_model = 8;      // d
    int vocab_size = 2;   // B
    int ffn_hidden = 0;
    float rms_eps = 1e-6f;
    float rope_theta = 10000.0f;  // <= 0 disables rotary embedding
    bool qkv_bias = false;
    int max_positions = 4096;
    VisionGeometry vision;

    int head_dim() const { return d_model / n_heads; }
    int group_size() const { return n_heads / n_kv_heads; }

    // Throws InputError when dimensions are inconsistent.
    void validate() const;
};

struct LayerWeights {
    Vector attn_norm;
    Matrix wq;  // (H*dh) x d
    Matrix wk;  // (Hkv*dh) x d
    Matrix wv;  // (Hkv*dh) x d
    Matrix wo;  // d x (H*dh)
    Vector bq, bk, bv;  // empty unless qkv_bias
    Vector ffn_norm;
    Matrix w_gate;  // f x d
    Matrix w_up;    // f x d
    Matrix w_down;  // d x f
};

struct ModelWeights {
    ModelConfig config;
    Matrix embed;    // E,   B x d
    Matrix unembed;  // E_u, B x d
    Vector final_norm;
    std::vector<LayerWeights> layers;

    // Throws InputError if any tensor disagrees with config.
    void validate() const;
};

struct Capabilities {
    bool activation_exposure = true;
};

// FIFO admission for model execution. At most one holder at a time; waiters
// are served in arrival order. `capacity` bounds the number of waiters.
class RunQueue {
public:
    explicit RunQueue(std::size_t capacity = 64) : capacity_(capacity) {}

    class Ticket {
    public:
        Ticket(Ticket&& other) noexcept : queue_(other.queue_) { other.queue_ = nullptr; }
        Ticket(const Ticket&) = delete;
        Ticket& operator=(const Ticket&) = delete;
        Ticket& operator=(Ticket&&) = delete;
        ~Ticket();

    private:
        friend class RunQueue;
        explicit Ticket(RunQueue* q) : queue_(q) {}
        RunQueue* queue_;
    };

    // Blocks until it is the caller's turn. Throws QueueSaturated when full.
    Ticket acquire();
    std::size_t waiting() const;
    std::size_t capacity() const { return capacity_; }

private:
    void release();

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::uint64_t next_ticket_ = 0;
    std::uint64_t serving_ = 0;
    std::size_t capacity_;
};

// Read-only weights plus the runtime state needed to execute them: the run
// queue and forward-pass counters.
class ModelHandle {
public:
    explicit ModelHandle(std::shared_ptr<const ModelWeights> weights, Capabilities caps = {},
                         std::size_t queue_capacity = 64);

    const ModelWeights& weights() const { return *weights_; }
    std::shared_ptr<const ModelWeights> shared_weights() const { return weights_; }
    const ModelConfig& config() const { return weights_->config; }
    const Capabilities& capabilities() const { return caps_; }

    RunQueue& queue() const { return queue_; }

    // Instrumented (traced) passes and plain generation passes are counted separately.
    std::uint64_t traced_passes() const { return traced_.load(); }
    std::uint64_t plain_passes() const { return plain_.load(); }
    void count_traced() const { traced_.fetch_add(1); }
    void count_plain() const { plain_.fetch_add(1); }

    // Next-token logits for a token sequence with an optional visual block
    // (rows replace the embeddings at positions [visual_begin, visual_begin + rows)).
    // Counts as one plain pass.
    Vector next_token_logits(std::span<const int> tokens, const Matrix* visual = nullptr,
                             int visual_begin = 0) const;

private:
    std::shared_ptr<const ModelWeights> weights_;
    Capabilities caps_;
    mutable RunQueue queue_;
    mutable std::atomic<std::uint64_t> traced_{0};
    mutable std::atomic<std::uint64_t> plain_{0};
};

// Options for the generic forward pass below.
struct ForwardCapture {
    bool keep_residuals = true;       // (L+2) x T x d
    bool full_attention = false;      // (L+1) x H x T x T, else last query row only
    std::vector<float> residuals;     // [layer+1][pos][dim], layer -1 = embeddings
    std::vector<float> attention;     // [layer][head][query?][key]
    std::vector<float> attn_out_last; // [layer][dim]
    std::vector<float> ffn_out_last;  // [layer][dim]
    Vector logits;
};

// Embeds tokens (visual rows substituted) into a T x d matrix.
Matrix embed_inputs(const ModelWeights& w, std::span<const int> tokens, const Matrix* visual,
                    int visual_begin);

// Runs every layer on the given T x d input and fills `capture`.
void forward(const ModelWeights& w, const Matrix& inputs, ForwardCapture& capture);

// RMS normalization with gain.
Vector rms_norm(const Eigen::Ref<const Vector>& x, const Vector& gain, float eps);
VectorD rms_norm(const VectorD& x, const Vector& gain, double eps);

// Rotary embedding in the rotate-half layout, applied in place to one head vector.
void apply_rope(std::span<float> head, int position, float theta);
void apply_rope(std::span<double> head, int position, double theta);

// Desk-scale configuration: 2 layers, 4 heads, d=32, the 100-token toy
// vocabulary, SwiGLU width 64, and a 6x6 patch grid over 96-pixel images.
ModelConfig toy_config();

// Seeded random model for tests and desk-scale runs. Weight scale follows the
// usual 1/sqrt(fan_in) initialisation.
std::shared_ptr<ModelWeights> make_random_model(const ModelConfig& config, std::uint64_t seed);

}  // namespace patchlens
