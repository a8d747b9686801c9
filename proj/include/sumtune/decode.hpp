#pragma once
// Autoregressive generation: greedy, beam search, and temperature/top-p
// sampling, built on an incremental per-session KV cache.
//
// Conventions shared by all strategies:
//   - the stop token ends generation and is excluded from the returned ids,
//   - its log-probability still counts toward the hypothesis score,
//   - generation is capped at max_new_tokens and at the model's max_seq,
//   - score is the mean log-probability of the scored tokens.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "model.hpp"

namespace sumtune {

enum class DecodeStrategy { greedy, beam, sample };

inline constexpr double kTemperatureFloor = 1e-4;

struct DecodeConfig {
    DecodeStrategy strategy = DecodeStrategy::greedy;
    int beam_size = 1;
    double temperature = 1.0;
    double top_p = 1.0;
    int max_new_tokens = 64;
    int stop_token = 1;

    void validate() const {
        if (beam_size < 1) throw ConfigError("beam_size must be at least 1");
        if (temperature <= 0.0) throw ConfigError("temperature must be positive");
        if (top_p <= 0.0 || top_p > 1.0) throw ConfigError("top_p must lie in (0, 1]");
        if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be at least 1");
        if (stop_token < 0) throw ConfigError("stop_token must be a non-negative id");
    }
};

// Incremental forward state. Each step feeds one token, appends its rotated
// key and value rows to the per-layer cache, and exposes the logits of the
// fed position. Copyable, so beam hypotheses can fork mid-generation.
class DecoderSession {
public:
    DecoderSession(const Parameters& params, const ModelConfig& cfg) : params_(&params), cfg_(cfg) {
        cfg_.validate();
        if (params.layers.size() != static_cast<size_t>(cfg_.n_layers))
            throw ConfigError("decoder session: layer count mismatch");
        k_cache_.assign(params.layers.size(), Mat::Zero(cfg_.max_seq, cfg_.d_model));
        v_cache_.assign(params.layers.size(), Mat::Zero(cfg_.max_seq, cfg_.d_model));
    }

    int position() const { return pos_; }

    const Vec& logits() const {
        if (pos_ == 0) throw DataError("decoder session: no token fed yet");
        return last_logits_;
    }

    const Vec& step(int token_id) {
        if (pos_ >= cfg_.max_seq) throw DataError("decoder session: max_seq exceeded");
        if (token_id < 0 || token_id >= cfg_.vocab_size) throw DataError("decoder session: token id out of range");
        const int d = cfg_.d_model;
        const int hd = cfg_.head_dim();
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        const std::vector<int> here = {pos_};

        Vec x = params_->token_embedding.row(token_id).transpose();
        for (size_t li = 0; li < params_->layers.size(); ++li) {
            const LayerParams& layer = params_->layers[li];
            Vec h1 = rms_norm(x, layer.attn_norm_g, cfg_.norm_eps);
            Eigen::RowVectorXd qkv = h1.transpose() * layer.fused_qkv;
            Eigen::RowVectorXd q = qkv.segment(0, d);
            Eigen::RowVectorXd k = qkv.segment(d, d);
            Mat spin(1, hd);
            for (int h = 0; h < cfg_.n_heads; ++h) {
                spin.row(0) = q.segment(h * hd, hd);
                rope_apply(spin, here, cfg_.rope_base);
                q.segment(h * hd, hd) = spin.row(0);
                spin.row(0) = k.segment(h * hd, hd);
                rope_apply(spin, here, cfg_.rope_base);
                k.segment(h * hd, hd) = spin.row(0);
            }
            k_cache_[li].row(pos_) = k;
            v_cache_[li].row(pos_) = qkv.segment(2 * d, d);

            Eigen::RowVectorXd ctx(d);
            for (int h = 0; h < cfg_.n_heads; ++h) {
                auto kh = k_cache_[li].block(0, h * hd, pos_ + 1, hd);
                auto vh = v_cache_[li].block(0, h * hd, pos_ + 1, hd);
                Vec s = kh * q.segment(h * hd, hd).transpose() * scale;
                Vec e = (s.array() - s.maxCoeff()).exp().matrix();
                e /= e.sum();
                ctx.segment(h * hd, hd) = e.transpose() * vh;
            }
            x += (ctx * layer.out_proj).transpose();
            x += swiglu_ffn(rms_norm(x, layer.ffn_norm_g, cfg_.norm_eps), layer.gate_w, layer.up_w, layer.down_w);
        }
        Vec xf = rms_norm(x, params_->final_norm_g, cfg_.norm_eps);
        last_logits_ = (xf.transpose() * params_->lm_head).transpose();
        ++pos_;
        return last_logits_;
    }

    const Vec& feed(const std::vector<int>& ids) {
        if (ids.empty()) throw DataError("decoder session: empty token list");
        for (int id : ids) step(id);
        return last_logits_;
    }

private:
    const Parameters* params_;
    ModelConfig cfg_;
    std::vector<Mat> k_cache_, v_cache_;
    Vec last_logits_;
    int pos_ = 0;
};

struct DecodeResult {
    std::vector<int> ids;
    double score = 0.0;
};

inline Vec log_softmax(const Vec& logits) {
    double mx = logits.maxCoeff();
    double lse = mx + std::log((logits.array() - mx).exp().sum());
    return (logits.array() - lse).matrix();
}

// Ties go to the lowest token id.
inline int argmax_token(const Vec& v) {
    int best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
        if (v(i) > v(best)) best = static_cast<int>(i);
    return best;
}

namespace detail {

inline int generation_cap(const ModelConfig& cfg, size_t prompt_len, const DecodeConfig& dc) {
    dc.validate();
    if (prompt_len == 0) throw DataError("decode: empty prompt");
    if (prompt_len >= static_cast<size_t>(cfg.max_seq)) throw DataError("decode: prompt does not fit max_seq");
    long long room = static_cast<long long>(cfg.max_seq) - static_cast<long long>(prompt_len);
    return static_cast<int>(std::min<long long>(dc.max_new_tokens, room));
}

// Token ids of the smallest probability-sorted prefix whose mass reaches
// top_p. Ties sort by token id, so the result is deterministic and always
// starts with the argmax token.
inline std::vector<int> nucleus_tokens(const Vec& probs, double top_p) {
    std::vector<int> order(static_cast<size_t>(probs.size()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (probs(a) != probs(b)) return probs(a) > probs(b);
        return a < b;
    });
    std::vector<int> keep;
    double cum = 0.0;
    for (int id : order) {
        keep.push_back(id);
        cum += probs(id);
        if (cum >= top_p - 1e-12) break;
    }
    return keep;
}

}  // namespace detail

inline DecodeResult greedy_decode(const Parameters& params, const ModelConfig& cfg, const std::vector<int>& prompt,
                                  const DecodeConfig& dc) {
    const int cap = detail::generation_cap(cfg, prompt.size(), dc);
    DecoderSession session(params, cfg);
    session.feed(prompt);
    DecodeResult out;
    double cum = 0.0;
    int count = 0;
    for (int t = 0; t < cap; ++t) {
        Vec lp = log_softmax(session.logits());
        int tok = argmax_token(lp);
        cum += lp(tok);
        ++count;
        if (tok == dc.stop_token) break;
        out.ids.push_back(tok);
        if (t + 1 < cap) session.step(tok);
    }
    out.score = count > 0 ? cum / count : 0.0;
    return out;
}

namespace detail {

struct BeamHypothesis {
    std::vector<int> ids;
    double cum = 0.0;
    int count = 0;
    DecoderSession session;

    double mean() const { return count > 0 ? cum / static_cast<double>(count) : 0.0; }
};

}  // namespace detail

// Length-normalized beam search. Hypotheses that emit the stop token retire
// into the finished pool while the beam slot they won is not refilled; the
// best finished hypothesis by mean log-probability wins, ties resolved by
// lexicographically smaller token ids.
inline DecodeResult beam_decode(const Parameters& params, const ModelConfig& cfg, const std::vector<int>& prompt,
                                const DecodeConfig& dc) {
    using detail::BeamHypothesis;
    const int cap = detail::generation_cap(cfg, prompt.size(), dc);
    DecoderSession root(params, cfg);
    root.feed(prompt);

    std::vector<BeamHypothesis> alive;
    alive.push_back(BeamHypothesis{{}, 0.0, 0, std::move(root)});
    std::vector<BeamHypothesis> done;

    struct Cand {
        int parent;
        int tok;
        double cum;
        int count;
    };
    for (int t = 0; t < cap && !alive.empty(); ++t) {
        std::vector<Cand> cands;
        cands.reserve(alive.size() * static_cast<size_t>(cfg.vocab_size));
        for (size_t i = 0; i < alive.size(); ++i) {
            Vec lp = log_softmax(alive[i].session.logits());
            for (int v = 0; v < cfg.vocab_size; ++v)
                cands.push_back({static_cast<int>(i), v, alive[i].cum + lp(v), alive[i].count + 1});
        }
        auto seq_less = [&](const Cand& a, const Cand& b) {
            const std::vector<int>& ia = alive[static_cast<size_t>(a.parent)].ids;
            const std::vector<int>& ib = alive[static_cast<size_t>(b.parent)].ids;
            size_t na = ia.size() + 1, nb = ib.size() + 1;
            for (size_t i = 0; i < std::min(na, nb); ++i) {
                int xa = i < ia.size() ? ia[i] : a.tok;
                int xb = i < ib.size() ? ib[i] : b.tok;
                if (xa != xb) return xa < xb;
            }
            return na < nb;
        };
        std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
            double ma = a.cum / a.count, mb = b.cum / b.count;
            if (ma != mb) return ma > mb;
            return seq_less(a, b);
        });

        std::vector<BeamHypothesis> next;
        size_t take = std::min(cands.size(), static_cast<size_t>(dc.beam_size));
        for (size_t c = 0; c < take; ++c) {
            const Cand& cand = cands[c];
            BeamHypothesis h = alive[static_cast<size_t>(cand.parent)];
            h.cum = cand.cum;
            h.count = cand.count;
            if (cand.tok == dc.stop_token) {
                done.push_back(std::move(h));
            } else {
                h.ids.push_back(cand.tok);
                if (t + 1 < cap) h.session.step(cand.tok);
                next.push_back(std::move(h));
            }
        }
        alive = std::move(next);
    }
    for (BeamHypothesis& h : alive) done.push_back(std::move(h));

    const BeamHypothesis* best = nullptr;
    for (const BeamHypothesis& h : done) {
        if (!best || h.mean() > best->mean() || (h.mean() == best->mean() && h.ids < best->ids)) best = &h;
    }
    return {best->ids, best->mean()};
}

// Temperature scaling with a floor of 1e-4, then top-p nucleus filtering,
// then one categorical draw per step. Scores use the untempered distribution.
inline DecodeResult sample_decode(const Parameters& params, const ModelConfig& cfg, const std::vector<int>& prompt,
                                  const DecodeConfig& dc, Rng& rng) {
    const int cap = detail::generation_cap(cfg, prompt.size(), dc);
    const double temp = std::max(dc.temperature, kTemperatureFloor);
    DecoderSession session(params, cfg);
    session.feed(prompt);
    DecodeResult out;
    double cum = 0.0;
    int count = 0;
    for (int t = 0; t < cap; ++t) {
        const Vec& logits = session.logits();
        Vec tempered_lp = log_softmax(logits / temp);
        Vec probs = tempered_lp.array().exp().matrix();
        std::vector<int> keep = detail::nucleus_tokens(probs, dc.top_p);
        double total = 0.0;
        for (int id : keep) total += probs(id);
        double u = uniform_real(rng, 0.0, 1.0) * total;
        int tok = keep.back();
        double walked = 0.0;
        for (int id : keep) {
            walked += probs(id);
            if (walked >= u) {
                tok = id;
                break;
            }
        }
        Vec lp = log_softmax(logits);
        cum += lp(tok);
        ++count;
        if (tok == dc.stop_token) break;
        out.ids.push_back(tok);
        if (t + 1 < cap) session.step(tok);
    }
    out.score = count > 0 ? cum / count : 0.0;
    return out;
}

inline DecodeResult decode(const Parameters& params, const ModelConfig& cfg, const std::vector<int>& prompt,
                           const DecodeConfig& dc, Rng* rng = nullptr) {
    switch (dc.strategy) {
        case DecodeStrategy::greedy:
            return greedy_decode(params, cfg, prompt, dc);
        case DecodeStrategy::beam:
            return beam_decode(params, cfg, prompt, dc);
        case DecodeStrategy::sample:
            if (!rng) throw ConfigError("decode: sampling requires an rng");
            return sample_decode(params, cfg, prompt, dc, *rng);
    }
    throw ConfigError("decode: unknown strategy");
}

}  // namespace sumtune
