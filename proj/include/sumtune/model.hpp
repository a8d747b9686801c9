#pragma once

// Decoder-only transformer with exact analytic gradients.
//
// Block layout per layer: RMSNorm -> causal multi-head attention with rotary
// position embeddings -> residual, RMSNorm -> SwiGLU feed-forward -> residual.
// A final RMSNorm and an untied linear head produce vocabulary logits. The
// fused QKV projection is the attachment point for low-rank adapters, and an
// embedding hook lets training inject noise after the embedding lookup and
// nowhere else.
//
// Sequences are processed at their true lengths, so pad positions can never
// leak into real positions. Gradients are hand-derived; finite differences
// exist only in the tests.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sumtune/common.hpp"
#include "sumtune/corpus.hpp"

namespace sumtune {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    int d_model = 0;
    int n_heads = 0;
    int n_layers = 0;
    int ffn_dim = 0;
    int max_seq = 0;
    int vocab_size = 0;
    double rope_base = 10000.0;
    double norm_eps = 1e-6;

    int head_dim() const { return n_heads == 0 ? 0 : d_model / n_heads; }

    void validate() const {
        if (d_model < 1) throw ConfigError("d_model must be positive");
        if (n_heads < 1) throw ConfigError("n_heads must be positive");
        if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
        if (head_dim() % 2 != 0) throw ConfigError("head dimension must be even for rotary embeddings");
        if (n_layers < 1) throw ConfigError("n_layers must be positive");
        if (ffn_dim < 1) throw ConfigError("ffn_dim must be positive");
        if (max_seq < 1) throw ConfigError("max_seq must be at least 1");
        if (vocab_size < 4) throw ConfigError("vocab_size must cover the special tokens");
        if (rope_base <= 0.0) throw ConfigError("rope_base must be positive");
        if (norm_eps <= 0.0) throw ConfigError("norm_eps must be positive");
    }

    // Desk-scale preset: trainable in minutes on a CPU.
    static ModelConfig desk(int vocab) {
        ModelConfig c;
        c.d_model = 128;
        c.n_heads = 4;
        c.n_layers = 4;
        c.ffn_dim = 344;
        c.max_seq = 512;
        c.vocab_size = vocab;
        return c;
    }

    // Full-scale preset matching the published architecture dimensions.
    // Constructible for shape checks; never trained here.
    static ModelConfig full_scale(int vocab) {
        ModelConfig c;
        c.d_model = 4096;
        c.n_heads = 32;
        c.n_layers = 32;
        c.ffn_dim = 11008;
        c.max_seq = 4096;
        c.vocab_size = vocab;
        return c;
    }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct LayerParams {
    Mat fused_qkv;  // d x 3d, columns [q | k | v]
    Mat out_proj;   // d x d
    Mat gate_w;     // d x ffn
    Mat up_w;       // d x ffn
    Mat down_w;     // ffn x d
    Vec attn_norm_g;
    Vec ffn_norm_g;
};

struct Parameters {
    Mat token_embedding;  // vocab x d
    std::vector<LayerParams> layers;
    Vec final_norm_g;
    Mat lm_head;  // d x vocab

    // Initialization: unit-variance embeddings keep the residual stream at
    // RMS ~1 from step zero; per-layer projections start near zero so blocks
    // begin as small perturbations; the head is scaled so logits start with
    // unit variance. Norm gains start at one. Draw order is fixed, so a seed
    // fully determines the weights.
    static Parameters init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        auto fill = [&rng](Mat& m, Eigen::Index rows, Eigen::Index cols, double stddev) {
            m.resize(rows, cols);
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal_real(rng, 0.0, stddev);
        };
        const double proj_std = 0.02 / std::sqrt(2.0 * cfg.n_layers);
        Parameters p;
        fill(p.token_embedding, cfg.vocab_size, cfg.d_model, 1.0);
        p.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (LayerParams& layer : p.layers) {
            fill(layer.fused_qkv, cfg.d_model, 3 * cfg.d_model, proj_std);
            fill(layer.out_proj, cfg.d_model, cfg.d_model, proj_std);
            fill(layer.gate_w, cfg.d_model, cfg.ffn_dim, proj_std);
            fill(layer.up_w, cfg.d_model, cfg.ffn_dim, proj_std);
            fill(layer.down_w, cfg.ffn_dim, cfg.d_model, proj_std);
            layer.attn_norm_g = Vec::Ones(cfg.d_model);
            layer.ffn_norm_g = Vec::Ones(cfg.d_model);
        }
        p.final_norm_g = Vec::Ones(cfg.d_model);
        fill(p.lm_head, cfg.d_model, cfg.vocab_size, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
        return p;
    }

    static Parameters zeros_like(const ModelConfig& cfg) {
        Parameters p;
        p.token_embedding = Mat::Zero(cfg.vocab_size, cfg.d_model);
        p.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (LayerParams& layer : p.layers) {
            layer.fused_qkv = Mat::Zero(cfg.d_model, 3 * cfg.d_model);
            layer.out_proj = Mat::Zero(cfg.d_model, cfg.d_model);
            layer.gate_w = Mat::Zero(cfg.d_model, cfg.ffn_dim);
            layer.up_w = Mat::Zero(cfg.d_model, cfg.ffn_dim);
            layer.down_w = Mat::Zero(cfg.ffn_dim, cfg.d_model);
            layer.attn_norm_g = Vec::Zero(cfg.d_model);
            layer.ffn_norm_g = Vec::Zero(cfg.d_model);
        }
        p.final_norm_g = Vec::Zero(cfg.d_model);
        p.lm_head = Mat::Zero(cfg.d_model, cfg.vocab_size);
        return p;
    }
};

struct TensorRef {
    std::string name;
    double* data;
    size_t size;
};

inline std::vector<TensorRef> tensor_refs(Parameters& p) {
    std::vector<TensorRef> refs;
    refs.push_back({"token_embedding", p.token_embedding.data(), static_cast<size_t>(p.token_embedding.size())});
    for (size_t i = 0; i < p.layers.size(); ++i) {
        LayerParams& layer = p.layers[i];
        std::string prefix = "layers." + std::to_string(i) + ".";
        refs.push_back({prefix + "fused_qkv", layer.fused_qkv.data(), static_cast<size_t>(layer.fused_qkv.size())});
        refs.push_back({prefix + "out_proj", layer.out_proj.data(), static_cast<size_t>(layer.out_proj.size())});
        refs.push_back({prefix + "gate_w", layer.gate_w.data(), static_cast<size_t>(layer.gate_w.size())});
        refs.push_back({prefix + "up_w", layer.up_w.data(), static_cast<size_t>(layer.up_w.size())});
        refs.push_back({prefix + "down_w", layer.down_w.data(), static_cast<size_t>(layer.down_w.size())});
        refs.push_back(
            {prefix + "attn_norm_g", layer.attn_norm_g.data(), static_cast<size_t>(layer.attn_norm_g.size())});
        refs.push_back({prefix + "ffn_norm_g", layer.ffn_norm_g.data(), static_cast<size_t>(layer.ffn_norm_g.size())});
    }
    refs.push_back({"final_norm_g", p.final_norm_g.data(), static_cast<size_t>(p.final_norm_g.size())});
    refs.push_back({"lm_head", p.lm_head.data(), static_cast<size_t>(p.lm_head.size())});
    return refs;
}

inline bool all_finite(const Parameters& p) {
    auto refs = tensor_refs(const_cast<Parameters&>(p));
    for (const TensorRef& ref : refs) {
        for (size_t i = 0; i < ref.size; ++i) {
            if (!std::isfinite(ref.data[i])) return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Low-rank adapter weights on the fused QKV projection. Lifecycle (attach,
// merge, checkpoints) lives elsewhere; these are the raw math containers the
// forward/backward passes consume.
// ---------------------------------------------------------------------------

struct LoraLayerWeights {
    Mat A;  // r x d
    Mat B;  // 3d x r
};

struct LoraWeights {
    double scale = 0.0;  // alpha / r
    double dropout_p = 0.0;
    uint64_t dropout_seed = 0;
    std::vector<LoraLayerWeights> layers;

    int rank() const { return layers.empty() ? 0 : static_cast<int>(layers[0].A.rows()); }
};

struct LoraGrads {
    std::vector<LoraLayerWeights> layers;

    static LoraGrads zeros_like(const LoraWeights& w) {
        LoraGrads g;
        g.layers.resize(w.layers.size());
        for (size_t i = 0; i < w.layers.size(); ++i) {
            g.layers[i].A = Mat::Zero(w.layers[i].A.rows(), w.layers[i].A.cols());
            g.layers[i].B = Mat::Zero(w.layers[i].B.rows(), w.layers[i].B.cols());
        }
        return g;
    }
};

inline std::vector<TensorRef> tensor_refs(LoraWeights& w) {
    std::vector<TensorRef> refs;
    for (size_t i = 0; i < w.layers.size(); ++i) {
        std::string prefix = "lora." + std::to_string(i) + ".";
        refs.push_back({prefix + "A", w.layers[i].A.data(), static_cast<size_t>(w.layers[i].A.size())});
        refs.push_back({prefix + "B", w.layers[i].B.data(), static_cast<size_t>(w.layers[i].B.size())});
    }
    return refs;
}

inline std::vector<TensorRef> tensor_refs(LoraGrads& g) {
    std::vector<TensorRef> refs;
    for (size_t i = 0; i < g.layers.size(); ++i) {
        std::string prefix = "lora." + std::to_string(i) + ".";
        refs.push_back({prefix + "A", g.layers[i].A.data(), static_cast<size_t>(g.layers[i].A.size())});
        refs.push_back({prefix + "B", g.layers[i].B.data(), static_cast<size_t>(g.layers[i].B.size())});
    }
    return refs;
}

// ---------------------------------------------------------------------------
// Unit operations
// ---------------------------------------------------------------------------

inline double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

inline double swish(double z) { return z * stable_sigmoid(z); }

inline Vec rms_norm(const Vec& x, const Vec& gain, double eps) {
    if (x.size() != gain.size()) throw ConfigError("rms_norm: dimension mismatch");
    double ms = x.squaredNorm() / static_cast<double>(x.size());
    double inv_r = 1.0 / std::sqrt(ms + eps);
    return (gain.array() * x.array() * inv_r).matrix();
}

// Row-wise RMSNorm; writes 1/rms per row for the backward pass.
inline Mat rms_norm_rows(const Mat& x, const Vec& gain, double eps, Vec* inv_r_out = nullptr) {
    Mat out(x.rows(), x.cols());
    if (inv_r_out) inv_r_out->resize(x.rows());
    const double n = static_cast<double>(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double inv_r = 1.0 / std::sqrt(x.row(i).squaredNorm() / n + eps);
        out.row(i) = (x.row(i).array() * inv_r * gain.transpose().array()).matrix();
        if (inv_r_out) (*inv_r_out)(i) = inv_r;
    }
    return out;
}

// d/dx of y = gain .* x / rms(x):
//   dx = inv_r * (gain .* dy) - x * (inv_r^3 / n) * <gain .* dy, x>
// dgain_accum may be null when the gain is frozen.
inline void rms_norm_backward_rows(const Mat& dy, const Mat& x, const Vec& gain, const Vec& inv_r, Mat& dx_out,
                                   Vec* dgain_accum) {
    using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;
    const double n = static_cast<double>(x.cols());
    dx_out.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        RowArray gdy = gain.transpose().array() * dy.row(i).array();
        double dot = (gdy * x.row(i).array()).sum();
        double r = inv_r(i);
        dx_out.row(i) = (r * gdy - x.row(i).array() * (r * r * r / n) * dot).matrix();
        if (dgain_accum) dgain_accum->array() += (x.row(i).array() * r * dy.row(i).array()).matrix().transpose().array();
    }
}

// Rotates each even/odd dimension pair of every row by pos * base^(-2i/dim).
// `inverse` applies the opposite rotation, which is the gradient mapping.
inline void rope_apply(Mat& x, const std::vector<int>& positions, double rope_base, bool inverse = false) {
    const Eigen::Index dim = x.cols();
    if (dim % 2 != 0) throw ConfigError("rope_apply: head dimension must be even");
    if (static_cast<size_t>(x.rows()) != positions.size())
        throw ConfigError("rope_apply: one position per row required");
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j + 1 < dim; j += 2) {
            double freq = std::pow(rope_base, -static_cast<double>(j) / static_cast<double>(dim));
            double theta = static_cast<double>(positions[static_cast<size_t>(i)]) * freq;
            if (inverse) theta = -theta;
            double c = std::cos(theta);
            double s = std::sin(theta);
            double a = x(i, j);
            double b = x(i, j + 1);
            x(i, j) = a * c - b * s;
            x(i, j + 1) = a * s + b * c;
        }
    }
}

inline Vec swiglu_ffn(const Vec& x, const Mat& gate_w, const Mat& up_w, const Mat& down_w) {
    Eigen::RowVectorXd a = x.transpose() * gate_w;
    Eigen::RowVectorXd b = x.transpose() * up_w;
    Eigen::RowVectorXd h(a.size());
    for (Eigen::Index i = 0; i < a.size(); ++i) h(i) = swish(a(i)) * b(i);
    return (h * down_w).transpose();
}

// Causal row-wise softmax over scores: row i attends to columns 0..i.
inline void causal_softmax_inplace(Mat& scores) {
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        double mx = scores(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
            scores(i, j) = std::exp(scores(i, j) - mx);
            sum += scores(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = 0.0;
    }
}

// Single-head causal attention over rotated q, k. Optionally exposes the
// attention probabilities.
inline Mat causal_attention(const Mat& q, const Mat& k, const Mat& v, Mat* probs_out = nullptr) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Mat p = q * k.transpose() * scale;
    causal_softmax_inplace(p);
    Mat out = p * v;
    if (probs_out) *probs_out = std::move(p);
    return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Applied to one embedded sequence (true length, no padding) before block 0.
using EmbeddingHook = std::function<void(Mat& embedded, size_t batch_row, int length)>;

struct ForwardOptions {
    const LoraWeights* lora = nullptr;
    bool train = false;              // enables adapter dropout
    uint64_t dropout_stream = 0;     // per-sequence substream id
};

struct LayerTrace {
    Mat x_in, xn1, q, k, v, ao, x2, xn2, a, b;
    Vec inv_r1, inv_r2;
    Mat lora_u;      // L x r
    Mat drop_mask;   // L x d multiplicative mask; empty means no dropout
};

struct SeqTrace {
    Mat x0;
    std::vector<LayerTrace> layers;
    Mat x_final;
    Vec inv_rf;
    Mat xf;
    Mat logits;
};

namespace detail {

inline Mat lora_dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, uint64_t seed) {
    Mat mask(rows, cols);
    Rng rng(seed);
    const double keep_scale = 1.0 / (1.0 - p);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) mask(r, c) = uniform_real(rng, 0.0, 1.0) < p ? 0.0 : keep_scale;
    return mask;
}

}  // namespace detail

// Runs one sequence at its true length and returns logits [L x vocab].
// When `trace` is given, every intermediate needed by the backward pass is
// recorded.
inline Mat forward_seq(const Parameters& params, const ModelConfig& cfg, const std::vector<int>& ids,
                       const ForwardOptions& opt = {}, SeqTrace* trace = nullptr,
                       const std::function<void(Mat&)>& embed_hook = nullptr) {
    const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
    if (L < 1) throw DataError("forward: empty sequence");
    if (L > cfg.max_seq) throw DataError("forward: sequence length exceeds max_seq");
    if (opt.lora && opt.lora->layers.size() != params.layers.size())
        throw ConfigError("forward: adapter layer count does not match the model");
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();

    Mat x(L, d);
    for (Eigen::Index t = 0; t < L; ++t) {
        int id = ids[static_cast<size_t>(t)];
        if (id < 0 || id >= cfg.vocab_size) throw DataError("forward: token id out of range");
        x.row(t) = params.token_embedding.row(id);
    }
    if (embed_hook) embed_hook(x);
    if (trace) {
        trace->x0 = x;
        trace->layers.assign(params.layers.size(), LayerTrace{});
    }

    std::vector<int> positions(static_cast<size_t>(L));
    for (Eigen::Index t = 0; t < L; ++t) positions[static_cast<size_t>(t)] = static_cast<int>(t);

    for (size_t li = 0; li < params.layers.size(); ++li) {
        const LayerParams& layer = params.layers[li];
        LayerTrace* lt = trace ? &trace->layers[li] : nullptr;
        if (lt) lt->x_in = x;

        Vec inv_r1;
        Mat xn1 = rms_norm_rows(x, layer.attn_norm_g, cfg.norm_eps, &inv_r1);
        Mat qkv = xn1 * layer.fused_qkv;
        if (opt.lora) {
            const LoraLayerWeights& lw = opt.lora->layers[li];
            Mat dropped;
            const Mat* adapter_in = &xn1;
            if (opt.train && opt.lora->dropout_p > 0.0) {
                Mat mask = detail::lora_dropout_mask(
                    L, d, opt.lora->dropout_p,
                    mix_seed({opt.lora->dropout_seed, opt.dropout_stream, static_cast<uint64_t>(li)}));
                dropped = mask.cwiseProduct(xn1);
                adapter_in = &dropped;
                if (lt) lt->drop_mask = std::move(mask);
            }
            Mat u = (*adapter_in) * lw.A.transpose();  // L x r
            qkv.noalias() += opt.lora->scale * (u * lw.B.transpose());
            if (lt) lt->lora_u = std::move(u);
        }

        Mat q = qkv.leftCols(d);
        Mat k = qkv.middleCols(d, d);
        Mat v = qkv.rightCols(d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            Mat qh = q.middleCols(h * hd, hd);
            Mat kh = k.middleCols(h * hd, hd);
            rope_apply(qh, positions, cfg.rope_base);
            rope_apply(kh, positions, cfg.rope_base);
            q.middleCols(h * hd, hd) = qh;
            k.middleCols(h * hd, hd) = kh;
        }

        Mat ao(L, d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            ao.middleCols(h * hd, hd) =
                causal_attention(q.middleCols(h * hd, hd), k.middleCols(h * hd, hd), v.middleCols(h * hd, hd));
        }
        Mat x2 = x + ao * layer.out_proj;

        Vec inv_r2;
        Mat xn2 = rms_norm_rows(x2, layer.ffn_norm_g, cfg.norm_eps, &inv_r2);
        Mat a = xn2 * layer.gate_w;
        Mat b = xn2 * layer.up_w;
        Mat h_act(L, cfg.ffn_dim);
        for (Eigen::Index r = 0; r < L; ++r)
            for (Eigen::Index c = 0; c < cfg.ffn_dim; ++c) h_act(r, c) = swish(a(r, c)) * b(r, c);
        Mat x3 = x2 + h_act * layer.down_w;

        if (lt) {
            lt->xn1 = std::move(xn1);
            lt->inv_r1 = std::move(inv_r1);
            lt->q = std::move(q);
            lt->k = std::move(k);
            lt->v = std::move(v);
            lt->ao = std::move(ao);
            lt->x2 = x2;
            lt->xn2 = std::move(xn2);
            lt->inv_r2 = std::move(inv_r2);
            lt->a = std::move(a);
            lt->b = std::move(b);
        }
        x = std::move(x3);
    }

    Vec inv_rf;
    Mat xf = rms_norm_rows(x, params.final_norm_g, cfg.norm_eps, &inv_rf);
    Mat logits = xf * params.lm_head;
    if (trace) {
        trace->x_final = std::move(x);
        trace->inv_rf = std::move(inv_rf);
        trace->xf = std::move(xf);
        trace->logits = logits;
    }
    return logits;
}

// Batched forward over a TokenBatch; row i's logits cover its true length.
inline std::vector<Mat> forward_batch(const Parameters& params, const ModelConfig& cfg, const TokenBatch& batch,
                                      const EmbeddingHook& hook = nullptr, const LoraWeights* lora = nullptr,
                                      bool train = false, uint64_t dropout_stream_base = 0, int threads = 1) {
    if (batch.max_len() > cfg.max_seq) throw DataError("forward: batch longer than max_seq");
    const size_t rows = static_cast<size_t>(batch.batch_size());
    std::vector<Mat> out(rows);
    parallel_for(rows, threads, [&](size_t r) {
        const int len = batch.lengths[r];
        std::vector<int> ids(static_cast<size_t>(len));
        for (int t = 0; t < len; ++t) ids[static_cast<size_t>(t)] = batch.token_ids(static_cast<Eigen::Index>(r), t);
        ForwardOptions opt;
        opt.lora = lora;
        opt.train = train;
        opt.dropout_stream = dropout_stream_base + r;
        std::function<void(Mat&)> seq_hook;
        if (hook) seq_hook = [&](Mat& x) { hook(x, r, len); };
        out[r] = forward_seq(params, cfg, ids, opt, nullptr, seq_hook);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct CeSum {
    double sum = 0.0;
    size_t count = 0;
};

inline double log_sum_exp_row(const Mat& logits, Eigen::Index row) {
    double mx = logits.row(row).maxCoeff();
    double s = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) s += std::exp(logits(row, j) - mx);
    return mx + std::log(s);
}

// Next-token cross entropy: a masked position t contributes
// -log P(ids[t] | logits[t-1]). Position 0 can never carry loss.
inline CeSum masked_ce_sum(const Mat& logits, const std::vector<int>& ids, const std::vector<uint8_t>& loss_mask) {
    if (ids.size() != loss_mask.size() || static_cast<size_t>(logits.rows()) != ids.size())
        throw ConfigError("masked_ce_sum: shape mismatch");
    CeSum ce;
    for (size_t t = 0; t < ids.size(); ++t) {
        if (!loss_mask[t]) continue;
        if (t == 0) throw DataError("loss mask covers position 0, which has no preceding context");
        Eigen::Index row = static_cast<Eigen::Index>(t) - 1;
        ce.sum += log_sum_exp_row(logits, row) - logits(row, ids[t]);
        ce.count += 1;
    }
    return ce;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

enum class GradMode { full, lora_only };

struct GradResult {
    double loss = 0.0;
    size_t loss_positions = 0;
    Parameters grads;     // zero tensors under lora_only
    LoraGrads lora_grads; // empty when no adapter is attached
};

namespace detail {

// Backward for one sequence. dlogit rows are unscaled (softmax - onehot);
// the caller divides the reduced gradient by the global masked-position count.
inline void backward_seq(const Parameters& params, const ModelConfig& cfg, const SeqTrace& trace,
                         const std::vector<int>& ids, const std::vector<uint8_t>& loss_mask,
                         const ForwardOptions& opt, GradMode mode, Parameters& g, LoraGrads* lg) {
    const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const bool base_grads = mode == GradMode::full;

    Mat dlogits = Mat::Zero(L, cfg.vocab_size);
    bool any = false;
    for (size_t t = 0; t < ids.size(); ++t) {
        if (!loss_mask[t]) continue;
        any = true;
        Eigen::Index row = static_cast<Eigen::Index>(t) - 1;
        double lse = log_sum_exp_row(trace.logits, row);
        for (Eigen::Index j = 0; j < cfg.vocab_size; ++j)
            dlogits(row, j) += std::exp(trace.logits(row, j) - lse);
        dlogits(row, ids[t]) -= 1.0;
    }
    if (!any) return;

    if (base_grads) g.lm_head.noalias() += trace.xf.transpose() * dlogits;
    Mat dxf = dlogits * params.lm_head.transpose();

    Mat dx;
    rms_norm_backward_rows(dxf, trace.x_final, params.final_norm_g, trace.inv_rf, dx,
                           base_grads ? &g.final_norm_g : nullptr);

    std::vector<int> positions(static_cast<size_t>(L));
    for (Eigen::Index t = 0; t < L; ++t) positions[static_cast<size_t>(t)] = static_cast<int>(t);

    for (size_t li = params.layers.size(); li-- > 0;) {
        const LayerParams& layer = params.layers[li];
        const LayerTrace& lt = trace.layers[li];
        LayerParams& gl = g.layers[li];

        // FFN block: x3 = x2 + (swish(a) .* b) * down_w
        Mat sig(L, cfg.ffn_dim);
        Mat h_act(L, cfg.ffn_dim);
        for (Eigen::Index r = 0; r < L; ++r) {
            for (Eigen::Index c = 0; c < cfg.ffn_dim; ++c) {
                double s = stable_sigmoid(lt.a(r, c));
                sig(r, c) = s;
                h_act(r, c) = lt.a(r, c) * s * lt.b(r, c);
            }
        }
        if (base_grads) gl.down_w.noalias() += h_act.transpose() * dx;
        Mat dh = dx * layer.down_w.transpose();
        Mat db = dh.cwiseProduct(lt.a.cwiseProduct(sig));  // dh .* swish(a)
        Mat da = dh.cwiseProduct(lt.b)
                     .cwiseProduct(sig.cwiseProduct(
                         (Mat::Ones(L, cfg.ffn_dim) + lt.a.cwiseProduct(Mat::Ones(L, cfg.ffn_dim) - sig))));
        if (base_grads) {
            gl.gate_w.noalias() += lt.xn2.transpose() * da;
            gl.up_w.noalias() += lt.xn2.transpose() * db;
        }
        Mat dxn2 = da * layer.gate_w.transpose() + db * layer.up_w.transpose();
        Mat dx2_norm;
        rms_norm_backward_rows(dxn2, lt.x2, layer.ffn_norm_g, lt.inv_r2, dx2_norm,
                               base_grads ? &gl.ffn_norm_g : nullptr);
        Mat dx2 = dx + dx2_norm;

        // Attention block: x2 = x_in + ao * out_proj
        if (base_grads) gl.out_proj.noalias() += lt.ao.transpose() * dx2;
        Mat dao = dx2 * layer.out_proj.transpose();

        Mat dq(L, d), dk(L, d), dv(L, d);
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        for (int h = 0; h < cfg.n_heads; ++h) {
            Mat qh = lt.q.middleCols(h * hd, hd);
            Mat kh = lt.k.middleCols(h * hd, hd);
            Mat vh = lt.v.middleCols(h * hd, hd);
            Mat p = qh * kh.transpose() * scale;
            causal_softmax_inplace(p);
            Mat dao_h = dao.middleCols(h * hd, hd);
            Mat dp = dao_h * vh.transpose();
            dv.middleCols(h * hd, hd) = p.transpose() * dao_h;
            Vec rowdot = (dp.cwiseProduct(p)).rowwise().sum();
            Mat ds = p.cwiseProduct(dp - rowdot * Eigen::RowVectorXd::Ones(L));
            dq.middleCols(h * hd, hd) = ds * kh * scale;
            dk.middleCols(h * hd, hd) = ds.transpose() * qh * scale;
        }
        for (int h = 0; h < cfg.n_heads; ++h) {
            Mat dqh = dq.middleCols(h * hd, hd);
            Mat dkh = dk.middleCols(h * hd, hd);
            rope_apply(dqh, positions, cfg.rope_base, true);
            rope_apply(dkh, positions, cfg.rope_base, true);
            dq.middleCols(h * hd, hd) = dqh;
            dk.middleCols(h * hd, hd) = dkh;
        }
        Mat dqkv(L, 3 * d);
        dqkv.leftCols(d) = dq;
        dqkv.middleCols(d, d) = dk;
        dqkv.rightCols(d) = dv;

        if (base_grads) gl.fused_qkv.noalias() += lt.xn1.transpose() * dqkv;
        Mat dxn1 = dqkv * layer.fused_qkv.transpose();

        if (opt.lora && lg) {
            const LoraLayerWeights& lw = opt.lora->layers[li];
            LoraLayerWeights& glw = lg->layers[li];
            const double s = opt.lora->scale;
            glw.B.noalias() += s * (dqkv.transpose() * lt.lora_u);
            Mat du = s * (dqkv * lw.B);  // L x r
            const bool dropped = lt.drop_mask.size() > 0;
            Mat xd = dropped ? lt.drop_mask.cwiseProduct(lt.xn1) : lt.xn1;
            glw.A.noalias() += du.transpose() * xd;
            Mat dxd = du * lw.A;
            dxn1 += dropped ? lt.drop_mask.cwiseProduct(dxd) : dxd;
        }

        Mat dx_in_norm;
        rms_norm_backward_rows(dxn1, lt.x_in, layer.attn_norm_g, lt.inv_r1, dx_in_norm,
                               base_grads ? &gl.attn_norm_g : nullptr);
        dx = dx2 + dx_in_norm;
    }

    if (base_grads) {
        for (Eigen::Index t = 0; t < L; ++t) g.token_embedding.row(ids[static_cast<size_t>(t)]) += dx.row(t);
    }
}

}  // namespace detail

// Mean masked cross entropy and its exact gradient over a batch. Per-sequence
// work fans out across threads; per-row gradient buffers are reduced in row
// order, so results do not depend on scheduling.
inline GradResult grad(const Parameters& params, const ModelConfig& cfg, const TokenBatch& batch,
                       GradMode mode = GradMode::full, const EmbeddingHook& hook = nullptr,
                       const LoraWeights* lora = nullptr, int threads = 1, uint64_t dropout_stream_base = 0) {
    if (mode == GradMode::lora_only && !lora) throw ConfigError("lora_only gradients require an attached adapter");
    if (batch.max_len() > cfg.max_seq) throw DataError("grad: batch longer than max_seq");
    const size_t rows = static_cast<size_t>(batch.batch_size());

    std::vector<Parameters> row_grads(rows);
    std::vector<LoraGrads> row_lora(rows);
    std::vector<CeSum> row_ce(rows);

    parallel_for(rows, threads, [&](size_t r) {
        const int len = batch.lengths[r];
        std::vector<int> ids(static_cast<size_t>(len));
        std::vector<uint8_t> mask(static_cast<size_t>(len));
        for (int t = 0; t < len; ++t) {
            ids[static_cast<size_t>(t)] = batch.token_ids(static_cast<Eigen::Index>(r), t);
            mask[static_cast<size_t>(t)] = batch.loss_mask(static_cast<Eigen::Index>(r), t);
        }
        ForwardOptions opt;
        opt.lora = lora;
        opt.train = true;
        opt.dropout_stream = dropout_stream_base + r;
        std::function<void(Mat&)> seq_hook;
        if (hook) seq_hook = [&](Mat& x) { hook(x, r, len); };

        SeqTrace trace;
        forward_seq(params, cfg, ids, opt, &trace, seq_hook);
        row_ce[r] = masked_ce_sum(trace.logits, ids, mask);

        row_grads[r] = Parameters::zeros_like(cfg);
        if (lora) row_lora[r] = LoraGrads::zeros_like(*lora);
        detail::backward_seq(params, cfg, trace, ids, mask, opt, mode, row_grads[r],
                             lora ? &row_lora[r] : nullptr);
    });

    GradResult result;
    result.grads = Parameters::zeros_like(cfg);
    if (lora) result.lora_grads = LoraGrads::zeros_like(*lora);
    double loss_sum = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        loss_sum += row_ce[r].sum;
        result.loss_positions += row_ce[r].count;
        auto dst = tensor_refs(result.grads);
        auto src = tensor_refs(row_grads[r]);
        for (size_t i = 0; i < dst.size(); ++i)
            Eigen::Map<Eigen::ArrayXd>(dst[i].data, static_cast<Eigen::Index>(dst[i].size)) +=
                Eigen::Map<const Eigen::ArrayXd>(src[i].data, static_cast<Eigen::Index>(src[i].size));
        if (lora) {
            auto ldst = tensor_refs(result.lora_grads);
            auto lsrc = tensor_refs(row_lora[r]);
            for (size_t i = 0; i < ldst.size(); ++i)
                Eigen::Map<Eigen::ArrayXd>(ldst[i].data, static_cast<Eigen::Index>(ldst[i].size)) +=
                    Eigen::Map<const Eigen::ArrayXd>(lsrc[i].data, static_cast<Eigen::Index>(lsrc[i].size));
        }
    }
    if (result.loss_positions > 0) {
        const double inv = 1.0 / static_cast<double>(result.loss_positions);
        result.loss = loss_sum * inv;
        for (TensorRef& ref : tensor_refs(result.grads))
            Eigen::Map<Eigen::ArrayXd>(ref.data, static_cast<Eigen::Index>(ref.size)) *= inv;
        if (lora) {
            for (TensorRef& ref : tensor_refs(result.lora_grads))
                Eigen::Map<Eigen::ArrayXd>(ref.data, static_cast<Eigen::Index>(ref.size)) *= inv;
        }
    }
    return result;
}

}  // namespace sumtune
