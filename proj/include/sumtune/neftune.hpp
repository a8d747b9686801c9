#pragma once

// Noisy-embedding training: elementwise Uniform(-1,1) noise scaled by
// alpha/sqrt(L*d) is added to the embedded sequence before block zero,
// during training only. L is always the true sequence length, never the
// padded width, and every sequence in a batch draws from its own substream.

#include <cmath>
#include <vector>

#include "sumtune/common.hpp"
#include "sumtune/model.hpp"

namespace sumtune {

struct NeftuneConfig {
    double alpha = 0.0;
    bool enabled = false;
    uint64_t seed = 0;

    void validate() const {
        if (alpha < 0.0) throw ConfigError("noise alpha must be non-negative");
    }
    bool active() const { return enabled && alpha > 0.0; }
};

inline double scale_factor(double alpha, int seq_len, int embed_dim) {
    if (seq_len < 1 || embed_dim < 1) throw ConfigError("scale_factor: length and dimension must be positive");
    return alpha / std::sqrt(static_cast<double>(seq_len) * static_cast<double>(embed_dim));
}

namespace detail {

inline void add_sequence_noise(Mat& x, int true_len, double alpha, uint64_t seed) {
    const double s = scale_factor(alpha, true_len, static_cast<int>(x.cols()));
    Rng rng(seed);
    for (Eigen::Index t = 0; t < true_len; ++t)
        for (Eigen::Index j = 0; j < x.cols(); ++j) x(t, j) += s * uniform_real(rng, -1.0, 1.0);
}

}  // namespace detail

// Noises a padded embedded batch in place: row i's first lengths[i] positions
// receive scaled noise, everything beyond stays bit-identical. Inactive
// configs leave the batch untouched.
inline void inject_noise(std::vector<Mat>& embedded, const std::vector<int>& lengths, const NeftuneConfig& config,
                         uint64_t stream = 0) {
    config.validate();
    if (embedded.size() != lengths.size()) throw ConfigError("inject_noise: one length per sequence required");
    if (!config.active()) return;
    for (size_t i = 0; i < embedded.size(); ++i) {
        if (lengths[i] < 1 || lengths[i] > embedded[i].rows())
            throw DataError("inject_noise: length outside the embedded matrix");
        detail::add_sequence_noise(embedded[i], lengths[i], config.alpha,
                                   mix_seed({config.seed, stream, static_cast<uint64_t>(i)}));
    }
}

enum class NoiseMode { train, eval };

// Adapts the injector to the model's embedding hook slot. Eval mode and
// inactive configs return the identity (no hook at all); the stream id
// separates optimizer micro-steps so noise is fresh every minibatch.
inline EmbeddingHook as_embedding_hook(const NeftuneConfig& config, NoiseMode mode, uint64_t stream = 0) {
    config.validate();
    if (mode == NoiseMode::eval || !config.active()) return nullptr;
    const double alpha = config.alpha;
    const uint64_t seed = config.seed;
    return [alpha, seed, stream](Mat& x, size_t batch_row, int length) {
        detail::add_sequence_noise(x, length, alpha, mix_seed({seed, stream, static_cast<uint64_t>(batch_row)}));
    };
}

}  // namespace sumtune
