#pragma once

// Training loop: masked cross entropy, Adam without weight decay, cosine
// learning-rate decay without warmup, gradient accumulation, and global L2
// clipping. One trainer owns the parameters and optimizer state; everything
// downstream of the seed is deterministic, including the loss log.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "sumtune/common.hpp"
#include "sumtune/corpus.hpp"
#include "sumtune/lora.hpp"
#include "sumtune/model.hpp"
#include "sumtune/neftune.hpp"

namespace sumtune {

struct TrainConfig {
    double learning_rate = 5e-5;
    int iterations = 9000;  // optimizer steps, counted after accumulation
    int batch_size = 2;
    int accumulation_steps = 4;
    double clip_theta = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;
    int checkpoint_every = 1000;
    double stop_loss = 0.0;  // > 0 stops once the logged step loss drops below it
    int threads = 1;

    void validate() const {
        if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
        if (iterations < 0) throw ConfigError("iterations must be non-negative");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (accumulation_steps < 1) throw ConfigError("accumulation_steps must be at least 1");
        if (clip_theta <= 0.0) throw ConfigError("clip_theta must be positive");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("adam betas must lie in [0, 1)");
        if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
        if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be at least 1");
        if (stop_loss < 0.0) throw ConfigError("stop_loss must be non-negative");
        if (threads < 1) throw ConfigError("threads must be at least 1");
    }
};

// Mean negative log likelihood over masked positions; an all-false mask
// costs zero.
inline double masked_cross_entropy(const Mat& logits, const std::vector<int>& ids,
                                   const std::vector<uint8_t>& loss_mask) {
    CeSum ce = masked_ce_sum(logits, ids, loss_mask);
    return ce.count == 0 ? 0.0 : ce.sum / static_cast<double>(ce.count);
}

// g' = g / max(1, ||g|| / theta) over the joint norm of every tensor in the
// set. Returns the pre-clip norm.
inline double clip_gradients(const std::vector<TensorRef>& grads, double theta) {
    if (theta <= 0.0) throw ConfigError("clip_gradients: theta must be positive");
    double sq = 0.0;
    for (const TensorRef& ref : grads) {
        for (size_t j = 0; j < ref.size; ++j) {
            double g = ref.data[j];
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + ref.name);
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    const double denom = std::max(1.0, norm / theta);
    if (denom > 1.0) {
        const double s = 1.0 / denom;
        for (const TensorRef& ref : grads)
            for (size_t j = 0; j < ref.size; ++j) ref.data[j] *= s;
    }
    return norm;
}

inline double cosine_lr(int step, int total_steps, double lr_max) {
    if (total_steps < 1) throw ConfigError("cosine_lr: total_steps must be positive");
    if (step < 0 || step > total_steps) throw ConfigError("cosine_lr: step outside [0, total_steps]");
    const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_max * (1.0 + std::cos(phase)) / 2.0;
}

struct AdamState {
    std::vector<Vec> m;
    std::vector<Vec> v;
    long long t = 0;

    static AdamState for_refs(const std::vector<TensorRef>& refs) {
        AdamState state;
        for (const TensorRef& ref : refs) {
            state.m.push_back(Vec::Zero(static_cast<Eigen::Index>(ref.size)));
            state.v.push_back(Vec::Zero(static_cast<Eigen::Index>(ref.size)));
        }
        return state;
    }
};

// Bias-corrected Adam with zero weight decay, applied in place through the
// value refs.
inline void adam_step(const std::vector<TensorRef>& values, const std::vector<TensorRef>& grads, AdamState& state,
                      double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (values.size() != grads.size() || values.size() != state.m.size())
        throw ConfigError("adam_step: tensor list mismatch");
    ++state.t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < values.size(); ++i) {
        if (values[i].size != grads[i].size || static_cast<size_t>(state.m[i].size()) != values[i].size)
            throw ConfigError("adam_step: shape mismatch in " + values[i].name);
        for (size_t j = 0; j < values[i].size; ++j) {
            const double g = grads[i].data[j];
            double& m = state.m[i](static_cast<Eigen::Index>(j));
            double& v = state.v[i](static_cast<Eigen::Index>(j));
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            values[i].data[j] -= lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
        }
    }
}

struct LogRow {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<LogRow> log;
    int steps_completed = 0;
    int epochs_started = 1;
    bool aborted_non_finite = false;
    bool stopped_early = false;
};

using CheckpointFn = std::function<void(int step, const Parameters&, const LoraAdapter*)>;

// Runs the full loop over tokenized samples. Each optimizer step accumulates
// accumulation_steps minibatch gradients, each divided by accumulation_steps
// so the sum equals the large-batch gradient, then clips and steps. Noise and
// adapter dropout draw fresh substreams per minibatch. Data order reshuffles
// every epoch from the seed; a non-finite loss aborts after writing a
// checkpoint.
inline TrainResult train(Parameters& params, const ModelConfig& model_cfg, LoraAdapter* adapter,
                         const std::vector<TokenizedSample>& data, const TrainConfig& cfg,
                         const NeftuneConfig& noise, int pad_id, const CheckpointFn& checkpoint = nullptr) {
    cfg.validate();
    noise.validate();
    model_cfg.validate();
    if (data.empty()) throw DataError("train: empty dataset");

    const GradMode mode = adapter ? GradMode::lora_only : GradMode::full;
    std::vector<TensorRef> trainable = trainable_parameters(params, adapter);
    AdamState state = AdamState::for_refs(trainable);

    std::vector<Vec> acc(trainable.size());
    std::vector<TensorRef> acc_refs(trainable.size());
    for (size_t i = 0; i < trainable.size(); ++i) {
        acc[i] = Vec::Zero(static_cast<Eigen::Index>(trainable[i].size));
        acc_refs[i] = {trainable[i].name, acc[i].data(), trainable[i].size};
    }

    TrainResult result;
    uint64_t epoch = 0;
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), size_t{0});
    {
        Rng shuffle_rng(mix_seed({cfg.seed, epoch}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
    }
    size_t cursor = 0;
    auto next_sample = [&]() -> const TokenizedSample& {
        if (cursor >= order.size()) {
            ++epoch;
            ++result.epochs_started;
            Rng shuffle_rng(mix_seed({cfg.seed, epoch}));
            std::shuffle(order.begin(), order.end(), shuffle_rng);
            cursor = 0;
        }
        return data[order[cursor++]];
    };

    uint64_t micro_counter = 0;
    for (int s = 0; s < cfg.iterations; ++s) {
        const double lr = cosine_lr(s, cfg.iterations, cfg.learning_rate);
        for (Vec& a : acc) a.setZero();
        double step_loss = 0.0;
        bool non_finite = false;

        for (int m = 0; m < cfg.accumulation_steps; ++m) {
            std::vector<TokenizedSample> group;
            group.reserve(static_cast<size_t>(cfg.batch_size));
            for (int b = 0; b < cfg.batch_size; ++b) group.push_back(next_sample());
            TokenBatch batch = pack_batch(group, pad_id);
            EmbeddingHook hook = as_embedding_hook(noise, NoiseMode::train, micro_counter);
            GradResult res = grad(params, model_cfg, batch, mode, hook, adapter ? &adapter->weights : nullptr,
                                  cfg.threads, micro_counter * static_cast<uint64_t>(cfg.batch_size));
            ++micro_counter;
            if (!std::isfinite(res.loss)) {
                non_finite = true;
                break;
            }
            const double inv = 1.0 / static_cast<double>(cfg.accumulation_steps);
            step_loss += res.loss * inv;
            auto src = adapter ? tensor_refs(res.lora_grads) : tensor_refs(res.grads);
            for (size_t i = 0; i < acc.size(); ++i)
                acc[i] += inv * Eigen::Map<const Vec>(src[i].data, static_cast<Eigen::Index>(src[i].size));
        }
        if (non_finite) {
            result.aborted_non_finite = true;
            if (checkpoint) checkpoint(result.steps_completed, params, adapter);
            break;
        }

        clip_gradients(acc_refs, cfg.clip_theta);
        adam_step(trainable, acc_refs, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        result.steps_completed = s + 1;
        result.log.push_back({s + 1, lr, step_loss});

        const bool stopping = cfg.stop_loss > 0.0 && step_loss < cfg.stop_loss;
        const bool last = stopping || s + 1 == cfg.iterations;
        const bool at_cadence = (s + 1) % cfg.checkpoint_every == 0;
        if (checkpoint && (at_cadence || last)) checkpoint(s + 1, params, adapter);
        if (stopping) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

inline std::string loss_csv(const std::vector<LogRow>& log) {
    std::string out = "step,lr,loss\n";
    char buf[96];
    for (const LogRow& row : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", row.step, row.lr, row.loss);
        out += buf;
    }
    return out;
}

inline void write_loss_csv(const std::vector<LogRow>& log, const std::string& path) {
    write_file(path, loss_csv(log));
}

}  // namespace sumtune
