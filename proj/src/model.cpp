#include "patchlens/model.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <random>

#include "patchlens/errors.hpp"

namespace patchlens {

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || n_kv_heads < 1 || d_model < 1 || vocab_size < 2) {
        throw InputError("model config: layers, heads, d_model must be >= 1 and vocab >= 2");
    }
    if (d_model % n_heads != 0) {
        throw InputError("model config: d_model must be divisible by n_heads");
    }
    if (n_heads % n_kv_heads != 0) {
        throw InputError("model config: n_heads must be a multiple of n_kv_heads");
    }
    if (rope_theta > 0.0f && head_dim() % 2 != 0) {
        throw InputError("model config: rotary embedding needs an even head dimension");
    }
    if (ffn_hidden < 0 || max_positions < 1) {
        throw InputError("model config: ffn_hidden must be >= 0 and max_positions >= 1");
    }
    if (vision.rows < 0 || vision.cols < 0 || (vision.rows == 0) != (vision.cols == 0)) {
        throw InputError("model config: vision grid must be both zero or both positive");
    }
}

namespace {

void expect_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
    if (m.rows() != rows || m.cols() != cols) {
        throw InputError(std::string("weights: ") + what + " has shape " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
}

void expect_len(const Vector& v, Eigen::Index n, const char* what) {
    if (v.size() != n) {
        throw InputError(std::string("weights: ") + what + " has length " + std::to_string(v.size()) +
                         ", expected " + std::to_string(n));
    }
}

}  // namespace

void ModelWeights::validate() const {
    config.validate();
    const int d = config.d_model;
    const int hd = config.n_heads * config.head_dim();
    const int kvd = config.n_kv_heads * config.head_dim();
    expect_shape(embed, config.vocab_size, d, "embed");
    expect_shape(unembed, config.vocab_size, d, "unembed");
    expect_len(final_norm, d, "final_norm");
    if (static_cast<int>(layers.size()) != config.n_layers) {
        throw InputError("weights: layer count does not match config");
    }
    for (const auto& lw : layers) {
        expect_len(lw.attn_norm, d, "attn_norm");
        expect_shape(lw.wq, hd, d, "wq");
        expect_shape(lw.wk, kvd, d, "wk");
        expect_shape(lw.wv, kvd, d, "wv");
        expect_shape(lw.wo, d, hd, "wo");
        if (config.qkv_bias) {
            expect_len(lw.bq, hd, "bq");
            expect_len(lw.bk, kvd, "bk");
            expect_len(lw.bv, kvd, "bv");
        }
        if (config.ffn_hidden > 0) {
            expect_len(lw.ffn_norm, d, "ffn_norm");
            expect_shape(lw.w_gate, config.ffn_hidden, d, "w_gate");
            expect_shape(lw.w_up, config.ffn_hidden, d, "w_up");
            expect_shape(lw.w_down, d, config.ffn_hidden, "w_down");
        }
    }
}

RunQueue::Ticket::~Ticket() {
    if (queue_ != nullptr) queue_->release();
}

RunQueue::Ticket RunQueue::acquire() {
    std::unique_lock lock(mu_);
    if (next_ticket_ - serving_ > capacity_) {
        throw QueueSaturated("run queue saturated");
    }
    const std::uint64_t mine = next_ticket_++;
    cv_.wait(lock, [&] { return serving_ == mine; });
    return Ticket(this);
}

void RunQueue::release() {
    {
        std::lock_guard lock(mu_);
        ++serving_;
    }
    cv_.notify_all();
}

std::size_t RunQueue::waiting() const {
    std::lock_guard lock(mu_);
    const auto in_flight = next_ticket_ - serving_;
    return in_flight == 0 ? 0 : static_cast<std::size_t>(in_flight - 1);
}

ModelHandle::ModelHandle(std::shared_ptr<const ModelWeights> weights, Capabilities caps,
                         std::size_t queue_capacity)
    : weights_(std::move(weights)), caps_(caps), queue_(queue_capacity) {
    if (!weights_) throw InputError("model handle: null weights");
    weights_->validate();
}

Vector ModelHandle::next_token_logits(std::span<const int> tokens, const Matrix* visual,
                                      int visual_begin) const {
    auto ticket = queue_.acquire();
    ForwardCapture cap;
    cap.keep_residuals = false;
    forward(*weights_, embed_inputs(*weights_, tokens, visual, visual_begin), cap);
    count_plain();
    return cap.logits;
}

Vector rms_norm(const Eigen::Ref<const Vector>& x, const Vector& gain, float eps) {
    const float ms = x.squaredNorm() / static_cast<float>(x.size());
    return (x.array() / std::sqrt(ms + eps) * gain.array()).matrix();
}

VectorD rms_norm(const VectorD& x, const Vector& gain, double eps) {
    const double ms = x.squaredNorm() / static_cast<double>(x.size());
    return (x.array() / std::sqrt(ms + eps) * gain.cast<double>().array()).matrix();
}

namespace {

template <typename T>
void rope_impl(std::span<T> head, int position, T theta) {
    const std::size_t half = head.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const T freq = std::pow(theta, -static_cast<T>(2 * i) / static_cast<T>(head.size()));
        const T angle = static_cast<T>(position) * freq;
        const T c = std::cos(angle);
        const T s = std::sin(angle);
        const T a = head[i];
        const T b = head[i + half];
        head[i] = a * c - b * s;
        head[i + half] = b * c + a * s;
    }
}

}  // namespace

void apply_rope(std::span<float> head, int position, float theta) { rope_impl<float>(head, position, theta); }
void apply_rope(std::span<double> head, int position, double theta) { rope_impl<double>(head, position, theta); }

Matrix embed_inputs(const ModelWeights& w, std::span<const int> tokens, const Matrix* visual,
                    int visual_begin) {
    const auto& cfg = w.config;
    const int t_len = static_cast<int>(tokens.size());
    Matrix x(t_len, cfg.d_model);
    const int vis_rows = visual ? static_cast<int>(visual->rows()) : 0;
    if (visual != nullptr) {
        if (visual->cols() != cfg.d_model) {
            throw InputError("visual block width " + std::to_string(visual->cols()) + " != hidden size " +
                             std::to_string(cfg.d_model));
        }
        if (visual_begin < 0 || visual_begin + vis_rows > t_len) {
            throw InputError("visual block does not fit inside the token sequence");
        }
    }
    for (int i = 0; i < t_len; ++i) {
        if (visual != nullptr && i >= visual_begin && i < visual_begin + vis_rows) {
            x.row(i) = visual->row(i - visual_begin);
            continue;
        }
        const int id = tokens[static_cast<std::size_t>(i)];
        if (id < 0 || id >= cfg.vocab_size) {
            throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
        }
        x.row(i) = w.embed.row(id);
    }
    return x;
}

void forward(const ModelWeights& w, const Matrix& inputs, ForwardCapture& cap) {
    const auto& cfg = w.config;
    const int t_len = static_cast<int>(inputs.rows());
    const int d = cfg.d_model;
    const int n_heads = cfg.n_heads;
    const int dh = cfg.head_dim();
    const int group = cfg.group_size();
    const int n_layers = cfg.n_layers;
    if (t_len < 1) throw InputError("forward: empty input");
    if (t_len > cfg.max_positions) throw InputError("forward: input exceeds max_positions");

    const std::size_t plane = static_cast<std::size_t>(t_len) * d;
    if (cap.keep_residuals) {
        cap.residuals.assign(static_cast<std::size_t>(n_layers + 1) * plane, 0.0f);
    }
    const std::size_t rows_per_head = cap.full_attention ? static_cast<std::size_t>(t_len) : 1;
    cap.attention.assign(static_cast<std::size_t>(n_layers) * n_heads * rows_per_head * t_len, 0.0f);
    cap.attn_out_last.assign(static_cast<std::size_t>(n_layers) * d, 0.0f);
    cap.ffn_out_last.assign(static_cast<std::size_t>(n_layers) * d, 0.0f);

    Matrix h = inputs;
    auto store_residual = [&](int slot) {
        if (cap.keep_residuals) {
            std::copy(h.data(), h.data() + plane, cap.residuals.begin() + static_cast<std::ptrdiff_t>(slot * plane));
        }
    };
    store_residual(0);

    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> scores(static_cast<std::size_t>(t_len));

    for (int l = 0; l < n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
        Matrix xn(t_len, d);
        for (int i = 0; i < t_len; ++i) xn.row(i) = rms_norm(h.row(i).transpose(), lw.attn_norm, cfg.rms_eps);

        Matrix q = xn * lw.wq.transpose();
        Matrix k = xn * lw.wk.transpose();
        Matrix v = xn * lw.wv.transpose();
        if (cfg.qkv_bias) {
            q.rowwise() += lw.bq.transpose();
            k.rowwise() += lw.bk.transpose();
            v.rowwise() += lw.bv.transpose();
        }
        if (cfg.rope_theta > 0.0f) {
            for (int i = 0; i < t_len; ++i) {
                for (int j = 0; j < n_heads; ++j) apply_rope(std::span<float>(q.row(i).data() + j * dh, dh), i, cfg.rope_theta);
                for (int j = 0; j < cfg.n_kv_heads; ++j) apply_rope(std::span<float>(k.row(i).data() + j * dh, dh), i, cfg.rope_theta);
            }
        }

        Matrix heads_out = Matrix::Zero(t_len, n_heads * dh);
        for (int j = 0; j < n_heads; ++j) {
            const int g = j / group;
            for (int i = 0; i < t_len; ++i) {
                float mx = -std::numeric_limits<float>::infinity();
                for (int p = 0; p <= i; ++p) {
                    float s = 0.0f;
                    for (int c = 0; c < dh; ++c) s += q(i, j * dh + c) * k(p, g * dh + c);
                    scores[static_cast<std::size_t>(p)] = s * inv_sqrt;
                    mx = std::max(mx, scores[static_cast<std::size_t>(p)]);
                }
                float denom = 0.0f;
                for (int p = 0; p <= i; ++p) {
                    scores[static_cast<std::size_t>(p)] = std::exp(scores[static_cast<std::size_t>(p)] - mx);
                    denom += scores[static_cast<std::size_t>(p)];
                }
                for (int p = 0; p <= i; ++p) {
                    const float a = scores[static_cast<std::size_t>(p)] / denom;
                    scores[static_cast<std::size_t>(p)] = a;
                    for (int c = 0; c < dh; ++c) heads_out(i, j * dh + c) += a * v(p, g * dh + c);
                }
                const bool last = i == t_len - 1;
                if (cap.full_attention || last) {
                    const std::size_t row = cap.full_attention ? static_cast<std::size_t>(i) : 0;
                    float* dst = cap.attention.data() +
                                 ((static_cast<std::size_t>(l) * n_heads + j) * rows_per_head + row) * t_len;
                    std::copy(scores.begin(), scores.begin() + i + 1, dst);
                }
            }
        }

        Matrix attn = heads_out * lw.wo.transpose();
        h += attn;
        std::copy(attn.row(t_len - 1).data(), attn.row(t_len - 1).data() + d,
                  cap.attn_out_last.begin() + static_cast<std::ptrdiff_t>(l) * d);

        if (cfg.ffn_hidden > 0) {
            Matrix hn(t_len, d);
            for (int i = 0; i < t_len; ++i) hn.row(i) = rms_norm(h.row(i).transpose(), lw.ffn_norm, cfg.rms_eps);
            Matrix gate = hn * lw.w_gate.transpose();
            const Matrix up = hn * lw.w_up.transpose();
            gate = (gate.array() / (1.0f + (-gate.array()).exp()) * up.array()).matrix();
            const Matrix ffn = gate * lw.w_down.transpose();
            h += ffn;
            std::copy(ffn.row(t_len - 1).data(), ffn.row(t_len - 1).data() + d,
                      cap.ffn_out_last.begin() + static_cast<std::ptrdiff_t>(l) * d);
        }
        store_residual(l + 1);
    }

    const Vector last = rms_norm(h.row(t_len - 1).transpose(), w.final_norm, cfg.rms_eps);
    cap.logits = w.unembed * last;
}

ModelConfig toy_config() {
    ModelConfig c;
    c.id = "toy";
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = 4;
    c.d_model = 32;
    c.vocab_size = 100;
    c.ffn_hidden = 64;
    c.rope_theta = 10000.0f;
    c.max_positions = 512;
    c.vision = {6, 6, 96};
    return c;
}

std::shared_ptr<ModelWeights> make_random_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    auto w = std::make_shared<ModelWeights>();
    w->config = config;
    std::mt19937_64 rng(seed);
    auto fill = [&](Matrix& m, Eigen::Index rows, Eigen::Index cols, float scale) {
        std::normal_distribution<float> dist(0.0f, scale);
        m.resize(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    };
    auto gain = [&](Vector& v, Eigen::Index n) {
        std::uniform_real_distribution<float> dist(0.8f, 1.2f);
        v.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
    };
    auto bias = [&](Vector& v, Eigen::Index n) {
        std::normal_distribution<float> dist(0.0f, 0.1f);
        v.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
    };

    const int d = config.d_model;
    const int hd = config.n_heads * config.head_dim();
    const int kvd = config.n_kv_heads * config.head_dim();
    const float in_scale = 1.0f / std::sqrt(static_cast<float>(d));
    fill(w->embed, config.vocab_size, d, 1.0f);
    fill(w->unembed, config.vocab_size, d, in_scale);
    gain(w->final_norm, d);
    w->layers.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& lw : w->layers) {
        gain(lw.attn_norm, d);
        fill(lw.wq, hd, d, in_scale);
        fill(lw.wk, kvd, d, in_scale);
        fill(lw.wv, kvd, d, in_scale);
        fill(lw.wo, d, hd, 1.0f / std::sqrt(static_cast<float>(hd)));
        if (config.qkv_bias) {
            bias(lw.bq, hd);
            bias(lw.bk, kvd);
            bias(lw.bv, kvd);
        }
        if (config.ffn_hidden > 0) {
            gain(lw.ffn_norm, d);
            fill(lw.w_gate, config.ffn_hidden, d, in_scale);
            fill(lw.w_up, config.ffn_hidden, d, in_scale);
            fill(lw.w_down, d, config.ffn_hidden, 1.0f / std::sqrt(static_cast<float>(config.ffn_hidden)));
        }
    }
    return w;
}

}  // namespace patchlens
