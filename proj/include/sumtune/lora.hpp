#pragma once

// Low-rank adaptation of the fused QKV projections. attach() freezes the base
// by construction: only the factor pairs ever reach the optimizer, and B
// starts at zero so a fresh adapter reproduces the base model bit for bit.
// merge() folds the learned delta into dense weights for deployment and
// consumes the adapter.

#include <algorithm>
#include <cmath>
#include <vector>

#include "sumtune/common.hpp"
#include "sumtune/model.hpp"

namespace sumtune {

struct LoraConfig {
    int rank = 9;
    double alpha = 18.0;  // effective scale = alpha / rank
    double dropout_p = 0.1;
    uint64_t seed = 0;

    void validate() const {
        if (rank < 1) throw ConfigError("lora rank must be at least 1");
        if (alpha <= 0.0) throw ConfigError("lora alpha must be positive");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("lora dropout must lie in [0, 1)");
    }
};

struct LoraAdapter {
    LoraConfig config;
    LoraWeights weights;
    bool consumed = false;  // set by merge; a consumed adapter is inert
};

// Builds factor pairs for every layer: A ~ normal(0, variance 1/rank),
// B = 0. The draw order is fixed, so the seed fully determines the adapter.
inline LoraAdapter attach(const Parameters& params, const LoraConfig& config) {
    config.validate();
    if (params.layers.empty()) throw ConfigError("attach: model has no layers");
    const Eigen::Index d_in = params.layers[0].fused_qkv.rows();
    const Eigen::Index d_out = params.layers[0].fused_qkv.cols();
    for (const LayerParams& layer : params.layers) {
        if (layer.fused_qkv.rows() != d_in || layer.fused_qkv.cols() != d_out)
            throw ConfigError("attach: inconsistent projection shapes across layers");
    }
    if (config.rank > std::min(d_in, d_out))
        throw ConfigError("lora rank exceeds the smaller projection dimension");

    LoraAdapter adapter;
    adapter.config = config;
    adapter.weights.scale = config.alpha / static_cast<double>(config.rank);
    adapter.weights.dropout_p = config.dropout_p;
    adapter.weights.dropout_seed = config.seed;
    Rng rng(config.seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(config.rank));
    adapter.weights.layers.resize(params.layers.size());
    for (LoraLayerWeights& lw : adapter.weights.layers) {
        lw.A.resize(config.rank, d_in);
        for (Eigen::Index r = 0; r < lw.A.rows(); ++r)
            for (Eigen::Index c = 0; c < lw.A.cols(); ++c) lw.A(r, c) = normal_real(rng, 0.0, stddev);
        lw.B = Mat::Zero(d_out, config.rank);
    }
    return adapter;
}

// W' = W + scale * (B A)^T per layer, dropout ignored (inference semantics).
// The adapter is consumed; merging it again is an error.
inline Parameters merge(const Parameters& base, LoraAdapter& adapter) {
    if (adapter.consumed) throw ConfigError("merge: adapter already consumed");
    if (adapter.weights.layers.size() != base.layers.size())
        throw ConfigError("merge: adapter layer count does not match the model");
    Parameters merged = base;
    for (size_t li = 0; li < base.layers.size(); ++li) {
        const LoraLayerWeights& lw = adapter.weights.layers[li];
        merged.layers[li].fused_qkv.noalias() += adapter.weights.scale * (lw.A.transpose() * lw.B.transpose());
    }
    adapter.consumed = true;
    adapter.weights.layers.clear();
    return merged;
}

// The optimizer's view: factor pairs when an adapter is attached, every base
// tensor otherwise.
inline std::vector<TensorRef> trainable_parameters(Parameters& params, LoraAdapter* adapter) {
    if (!adapter) return tensor_refs(params);
    if (adapter->consumed) throw ConfigError("trainable_parameters: adapter already consumed");
    return tensor_refs(adapter->weights);
}

inline size_t parameter_count(const std::vector<TensorRef>& refs) {
    size_t n = 0;
    for (const TensorRef& ref : refs) n += ref.size;
    return n;
}

}  // namespace sumtune
