#include "induction.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <span>

#include "oracle.hpp"
#include "patchlens/attribution.hpp"
#include "patchlens/trace.hpp"

namespace induction {

using patchlens::VectorD;

std::vector<int> Task::sample(int vocab, std::mt19937_64& rng) const {
    std::vector<int> pool(static_cast<std::size_t>(vocab - first_token));
    std::iota(pool.begin(), pool.end(), first_token);
    std::shuffle(pool.begin(), pool.end(), rng);
    const int half = std::uniform_int_distribution<int>(min_half, max_half)(rng);
    std::vector<int> seq;
    seq.reserve(static_cast<std::size_t>(2 * half + 1));
    seq.push_back(bos);
    for (int rep = 0; rep < 2; ++rep) seq.insert(seq.end(), pool.begin(), pool.begin() + half);
    return seq;
}

namespace {

void init_param(Param& p, Eigen::Index rows, Eigen::Index cols, double scale, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, scale);
    p.value.resize(rows, cols);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
    p.grad = MatrixD::Zero(rows, cols);
    p.m = MatrixD::Zero(rows, cols);
    p.v = MatrixD::Zero(rows, cols);
}

void rms_rows(const MatrixD& x, double eps, MatrixD& y, VectorD& r) {
    const double d = static_cast<double>(x.cols());
    y.resize(x.rows(), x.cols());
    r.resize(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        r(i) = 1.0 / std::sqrt(x.row(i).squaredNorm() / d + eps);
        y.row(i) = x.row(i) * r(i);
    }
}

MatrixD rms_back(const MatrixD& x, const VectorD& r, const MatrixD& dy) {
    const double d = static_cast<double>(x.cols());
    MatrixD dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double ri = r(i);
        dx.row(i) = ri * dy.row(i) - (ri * ri * ri / d) * x.row(i).dot(dy.row(i)) * x.row(i);
    }
    return dx;
}

// sign = +1 rotates, -1 applies the transpose.
void rope_rows(MatrixD& m, int n_heads, int dh, double theta, int sign) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < n_heads; ++j) {
            patchlens::apply_rope(std::span<double>(m.row(i).data() + j * dh, static_cast<std::size_t>(dh)),
                                  sign * static_cast<int>(i), theta);
        }
    }
}

}  // namespace

struct Trainer::Cache {
    std::vector<MatrixD> x;  // layer inputs, x[L] = final residual
    std::vector<MatrixD> n;
    std::vector<VectorD> r;
    std::vector<MatrixD> q, k, v, z;
    std::vector<std::vector<MatrixD>> attn;
    MatrixD nf;
    VectorD rf;
    MatrixD logits;
};

Trainer::Trainer(patchlens::ModelConfig config, Task task, std::uint64_t seed)
    : config_(std::move(config)), task_(task), rng_(seed) {
    config_.ffn_hidden = 0;
    config_.qkv_bias = false;
    config_.n_kv_heads = config_.n_heads;
    config_.vision = {};
    config_.validate();
    const int d = config_.d_model;
    const int hd = config_.n_heads * config_.head_dim();
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(d));
    init_param(embed_, config_.vocab_size, d, 1.0, rng_);
    init_param(unembed_, config_.vocab_size, d, in_scale, rng_);
    layers_.resize(static_cast<std::size_t>(config_.n_layers));
    for (auto& layer : layers_) {
        init_param(layer.wq, hd, d, in_scale, rng_);
        init_param(layer.wk, hd, d, in_scale, rng_);
        init_param(layer.wv, hd, d, in_scale, rng_);
        init_param(layer.wo, d, hd, 1.0 / std::sqrt(static_cast<double>(hd)), rng_);
    }
}

std::vector<Param*> Trainer::params() {
    std::vector<Param*> out{&embed_, &unembed_};
    for (auto& layer : layers_) {
        out.insert(out.end(), {&layer.wq, &layer.wk, &layer.wv, &layer.wo});
    }
    return out;
}

void Trainer::forward(const std::vector<int>& tokens, Cache& c) const {
    const int t_len = static_cast<int>(tokens.size());
    const int n_layers = config_.n_layers;
    const int n_heads = config_.n_heads;
    const int dh = config_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double theta = config_.rope_theta;
    const double eps = config_.rms_eps;

    c.x.assign(static_cast<std::size_t>(n_layers + 1), MatrixD());
    c.n.assign(static_cast<std::size_t>(n_layers), MatrixD());
    c.r.assign(static_cast<std::size_t>(n_layers), VectorD());
    c.q = c.k = c.v = c.z = c.n;
    c.attn.assign(static_cast<std::size_t>(n_layers), std::vector<MatrixD>(static_cast<std::size_t>(n_heads)));

    c.x[0].resize(t_len, config_.d_model);
    for (int i = 0; i < t_len; ++i) c.x[0].row(i) = embed_.value.row(tokens[static_cast<std::size_t>(i)]);

    for (int l = 0; l < n_layers; ++l) {
        const auto li = static_cast<std::size_t>(l);
        const Layer& w = layers_[li];
        rms_rows(c.x[li], eps, c.n[li], c.r[li]);
        c.q[li] = c.n[li] * w.wq.value.transpose();
        c.k[li] = c.n[li] * w.wk.value.transpose();
        c.v[li] = c.n[li] * w.wv.value.transpose();
        if (theta > 0.0) {
            rope_rows(c.q[li], n_heads, dh, theta, 1);
            rope_rows(c.k[li], n_heads, dh, theta, 1);
        }
        c.z[li] = MatrixD::Zero(t_len, n_heads * dh);
        for (int j = 0; j < n_heads; ++j) {
            MatrixD s = c.q[li].middleCols(j * dh, dh) * c.k[li].middleCols(j * dh, dh).transpose() * scale;
            for (int i = 0; i < t_len; ++i) {
                const double mx = s.row(i).head(i + 1).maxCoeff();
                double denom = 0.0;
                for (int p = 0; p < t_len; ++p) {
                    s(i, p) = p <= i ? std::exp(s(i, p) - mx) : 0.0;
                    denom += s(i, p);
                }
                s.row(i) /= denom;
            }
            c.z[li].middleCols(j * dh, dh) = s * c.v[li].middleCols(j * dh, dh);
            c.attn[li][static_cast<std::size_t>(j)] = std::move(s);
        }
        c.x[li + 1] = c.x[li] + c.z[li] * w.wo.value.transpose();
    }
    rms_rows(c.x.back(), eps, c.nf, c.rf);
    c.logits = c.nf * unembed_.value.transpose();
}

void Trainer::zero_grad() {
    for (Param* p : params()) p->grad.setZero();
}

double Trainer::loss_and_grad(const std::vector<std::vector<int>>& batch) {
    const int n_layers = config_.n_layers;
    const int n_heads = config_.n_heads;
    const int dh = config_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double theta = config_.rope_theta;

    std::size_t count = 0;
    for (const auto& seq : batch) {
        count += static_cast<std::size_t>(std::max(0, static_cast<int>(seq.size()) - 1 - Task::first_predictable(seq)));
    }
    if (count == 0) return 0.0;
    const double inv_count = 1.0 / static_cast<double>(count);

    double loss = 0.0;
    Cache c;
    for (const auto& tokens : batch) {
        forward(tokens, c);
        const int t_len = static_cast<int>(tokens.size());
        MatrixD dlogits = MatrixD::Zero(t_len, config_.vocab_size);
        for (int i = Task::first_predictable(tokens); i + 1 < t_len; ++i) {
            const int target = tokens[static_cast<std::size_t>(i + 1)];
            const double mx = c.logits.row(i).maxCoeff();
            Eigen::RowVectorXd p = (c.logits.row(i).array() - mx).exp();
            const double z = p.sum();
            p /= z;
            loss -= (c.logits(i, target) - mx - std::log(z)) * inv_count;
            p(target) -= 1.0;
            dlogits.row(i) = p * inv_count;
        }

        unembed_.grad += dlogits.transpose() * c.nf;
        MatrixD dx = rms_back(c.x.back(), c.rf, dlogits * unembed_.value);

        for (int l = n_layers - 1; l >= 0; --l) {
            const auto li = static_cast<std::size_t>(l);
            Layer& w = layers_[li];
            w.wo.grad += dx.transpose() * c.z[li];
            const MatrixD dz = dx * w.wo.value;
            MatrixD dq = MatrixD::Zero(t_len, n_heads * dh);
            MatrixD dk = dq;
            MatrixD dv = dq;
            for (int j = 0; j < n_heads; ++j) {
                const MatrixD& a = c.attn[li][static_cast<std::size_t>(j)];
                const auto d_out = dz.middleCols(j * dh, dh);
                const MatrixD da = d_out * c.v[li].middleCols(j * dh, dh).transpose();
                dv.middleCols(j * dh, dh) += a.transpose() * d_out;
                const Eigen::VectorXd row_dot = (da.array() * a.array()).rowwise().sum();
                const MatrixD ds = (a.array() * (da.colwise() - row_dot).array()).matrix() * scale;
                dq.middleCols(j * dh, dh) += ds * c.k[li].middleCols(j * dh, dh);
                dk.middleCols(j * dh, dh) += ds.transpose() * c.q[li].middleCols(j * dh, dh);
            }
            if (theta > 0.0) {
                rope_rows(dq, n_heads, dh, theta, -1);
                rope_rows(dk, n_heads, dh, theta, -1);
            }
            w.wq.grad += dq.transpose() * c.n[li];
            w.wk.grad += dk.transpose() * c.n[li];
            w.wv.grad += dv.transpose() * c.n[li];
            const MatrixD dn = dq * w.wq.value + dk * w.wk.value + dv * w.wv.value;
            dx += rms_back(c.x[li], c.r[li], dn);
        }
        for (int i = 0; i < t_len; ++i) embed_.grad.row(tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    }
    return loss;
}

void Trainer::shrink_heads(double amount) {
    if (amount <= 0.0) return;
    const int dh = config_.head_dim();
    Layer& layer = layers_.back();
    auto shrink = [amount](auto&& block) {
        const double norm = block.norm();
        block *= norm > amount ? 1.0 - amount / norm : 0.0;
    };
    for (int j = 0; j < config_.n_heads; ++j) {
        shrink(layer.wq.value.middleRows(j * dh, dh));
        shrink(layer.wk.value.middleRows(j * dh, dh));
        shrink(layer.wv.value.middleRows(j * dh, dh));
        shrink(layer.wo.value.middleCols(j * dh, dh));
    }
}

void Trainer::adam_step(double lr) {
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;
    ++steps_;
    const double c1 = 1.0 - std::pow(b1, steps_);
    const double c2 = 1.0 - std::pow(b2, steps_);
    for (Param* p : params()) {
        p->m = b1 * p->m + (1.0 - b1) * p->grad;
        p->v = b2 * p->v + (1.0 - b2) * p->grad.cwiseProduct(p->grad);
        p->value.array() -= lr * (p->m.array() / c1) / ((p->v.array() / c2).sqrt() + eps);
    }
}

double Trainer::accuracy(const std::vector<std::vector<int>>& sequences) const {
    std::size_t total = 0;
    std::size_t correct = 0;
    Cache c;
    for (const auto& tokens : sequences) {
        forward(tokens, c);
        for (int i = Task::first_predictable(tokens); i + 1 < static_cast<int>(tokens.size()); ++i) {
            Eigen::Index best = 0;
            c.logits.row(i).maxCoeff(&best);
            correct += static_cast<int>(best) == tokens[static_cast<std::size_t>(i + 1)] ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

MatrixD Trainer::logits(const std::vector<int>& tokens) const {
    Cache c;
    forward(tokens, c);
    return c.logits;
}

double Trainer::train(const TrainOptions& o) {
    auto draw = [&](int n) {
        std::vector<std::vector<int>> out;
        for (int i = 0; i < n; ++i) out.push_back(task_.sample(config_.vocab_size, rng_));
        return out;
    };
    for (int step = 1; step <= o.max_steps; ++step) {
        zero_grad();
        loss_and_grad(draw(o.batch));
        adam_step(o.lr);
        if (step % o.eval_every == 0 && accuracy(draw(o.eval_sequences)) >= o.target_accuracy) break;
    }
    if (o.head_sparsity > 0.0) {
        const double ramp = std::max(1.0, o.prune_steps / 2.0);
        for (int step = 1; step <= o.prune_steps; ++step) {
            zero_grad();
            loss_and_grad(draw(o.batch));
            adam_step(o.lr);
            shrink_heads(o.lr * o.head_sparsity * std::min(1.0, step / ramp));
        }
        const int dh = config_.head_dim();
        Layer& last = layers_.back();
        std::vector<int> removed;
        for (int j = 0; j < config_.n_heads; ++j) {
            if (last.wo.value.middleCols(j * dh, dh).isZero(0.0)) removed.push_back(j);
        }
        for (int step = 1; step <= o.finetune_steps; ++step) {
            zero_grad();
            loss_and_grad(draw(o.batch));
            adam_step(o.lr);
            for (int j : removed) {
                last.wq.value.middleRows(j * dh, dh).setZero();
                last.wk.value.middleRows(j * dh, dh).setZero();
                last.wv.value.middleRows(j * dh, dh).setZero();
                last.wo.value.middleCols(j * dh, dh).setZero();
            }
            if (step % o.eval_every == 0 && accuracy(draw(o.eval_sequences)) >= o.target_accuracy) break;
        }
    }
    return accuracy(draw(o.eval_sequences));
}

std::shared_ptr<patchlens::ModelWeights> Trainer::export_weights() const {
    auto w = std::make_shared<patchlens::ModelWeights>();
    w->config = config_;
    const int d = config_.d_model;
    w->embed = embed_.value.cast<float>();
    w->unembed = unembed_.value.cast<float>();
    w->final_norm = patchlens::Vector::Ones(d);
    for (const auto& layer : layers_) {
        patchlens::LayerWeights lw;
        lw.attn_norm = patchlens::Vector::Ones(d);
        lw.wq = layer.wq.value.cast<float>();
        lw.wk = layer.wk.value.cast<float>();
        lw.wv = layer.wv.value.cast<float>();
        lw.wo = layer.wo.value.cast<float>();
        w->layers.push_back(std::move(lw));
    }
    w->validate();
    return w;
}

Recovery run_recovery(std::uint64_t seed, const TrainOptions& options, int cases) {
    const auto start = std::chrono::steady_clock::now();
    Trainer trainer(patchlens::toy_config(), Task{}, seed);
    Recovery out;
    out.train_accuracy = trainer.train(options);
    out.steps = trainer.steps_taken();

    const Task& task = trainer.task();
    const patchlens::ModelHandle model(trainer.export_weights());
    std::vector<std::shared_ptr<const patchlens::Trace>> traces;
    std::vector<std::pair<const patchlens::Trace*, int>> scored;
    std::vector<int> induced;
    int correct = 0;
    for (int n = 0; n < cases; ++n) {
        const auto seq = task.sample(model.config().vocab_size, trainer.rng());
        const int end = std::uniform_int_distribution<int>(Task::first_predictable(seq),
                                                           static_cast<int>(seq.size()) - 2)(trainer.rng());
        std::vector<int> prefix(seq.begin(), seq.begin() + end + 1);
        const int target = seq[static_cast<std::size_t>(end + 1)];
        traces.push_back(patchlens::run_traced(model, {prefix, std::nullopt},
                                               patchlens::PositionMap::text_only(end + 1)));
        correct += traces.back()->predicted_token() == target ? 1 : 0;
        scored.emplace_back(traces.back().get(), target);
        induced.push_back(Task::induced_position(seq, end));
    }
    out.model_accuracy = static_cast<double>(correct) / cases;
    out.by_profile = patchlens::head_importance_profile(scored, 1).top_heads.front();

    double best = -1.0;
    const auto& cfg = model.config();
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int j = 0; j < cfg.n_heads; ++j) {
            double mean = 0.0;
            for (std::size_t n = 0; n < traces.size(); ++n) {
                mean += oracle::attention_row(*traces[n], {l, j})[static_cast<std::size_t>(induced[n])];
            }
            mean /= static_cast<double>(traces.size());
            if (mean > best) {
                best = mean;
                out.by_attention = {l, j};
            }
        }
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

}  // namespace induction
