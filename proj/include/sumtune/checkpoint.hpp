#pragma once
// Versioned binary container for model and adapter snapshots: an 8-byte
// magic, a format version, a JSON header describing config and tensor
// shapes, then the raw tensor blobs in header order. Doubles are written
// as host-order bytes, so round trips are bit-exact (including NaN from
// an aborted run). Adapters record the hash of the base model they were
// trained against and refuse to attach to anything else.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lora.hpp"
#include "model.hpp"
#include "neftune.hpp"

namespace sumtune {

inline constexpr char kCheckpointMagic[8] = {'S', 'U', 'M', 'T', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

struct TensorView {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    const double* data = nullptr;

    size_t count() const { return static_cast<size_t>(rows) * static_cast<size_t>(cols); }
};

inline void add_view(std::vector<TensorView>& out, std::string name, const Mat& m) {
    out.push_back({std::move(name), m.rows(), m.cols(), m.data()});
}
inline void add_view(std::vector<TensorView>& out, std::string name, const Vec& v) {
    out.push_back({std::move(name), v.rows(), v.cols(), v.data()});
}

// Same tensors, names, and order as tensor_refs, with shapes attached.
inline std::vector<TensorView> tensor_views(const Parameters& p) {
    std::vector<TensorView> views;
    add_view(views, "token_embedding", p.token_embedding);
    for (size_t i = 0; i < p.layers.size(); ++i) {
        const LayerParams& layer = p.layers[i];
        std::string prefix = "layers." + std::to_string(i) + ".";
        add_view(views, prefix + "fused_qkv", layer.fused_qkv);
        add_view(views, prefix + "out_proj", layer.out_proj);
        add_view(views, prefix + "gate_w", layer.gate_w);
        add_view(views, prefix + "up_w", layer.up_w);
        add_view(views, prefix + "down_w", layer.down_w);
        add_view(views, prefix + "attn_norm_g", layer.attn_norm_g);
        add_view(views, prefix + "ffn_norm_g", layer.ffn_norm_g);
    }
    add_view(views, "final_norm_g", p.final_norm_g);
    add_view(views, "lm_head", p.lm_head);
    return views;
}

inline std::vector<TensorView> tensor_views(const LoraWeights& w) {
    std::vector<TensorView> views;
    for (size_t i = 0; i < w.layers.size(); ++i) {
        std::string prefix = "lora." + std::to_string(i) + ".";
        add_view(views, prefix + "A", w.layers[i].A);
        add_view(views, prefix + "B", w.layers[i].B);
    }
    return views;
}

inline nlohmann::json tensor_index(const std::vector<TensorView>& views) {
    nlohmann::json arr = nlohmann::json::array();
    for (const TensorView& t : views)
        arr.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    return arr;
}

inline void write_container(const std::filesystem::path& path, const nlohmann::json& header,
                            const std::vector<TensorView>& views) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint: " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    std::string text = header.dump();
    uint64_t header_len = text.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const TensorView& t : views)
        out.write(reinterpret_cast<const char*>(t.data),
                  static_cast<std::streamsize>(t.count() * sizeof(double)));
    out.flush();
    if (!out) throw DataError("failed while writing checkpoint: " + path.string());
}

inline void read_exact(std::ifstream& in, void* dst, size_t n, const std::filesystem::path& path) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) throw DataError("truncated checkpoint: " + path.string());
}

inline nlohmann::json read_header(std::ifstream& in, const std::filesystem::path& path) {
    char magic[sizeof(kCheckpointMagic)];
    read_exact(in, magic, sizeof(magic), path);
    for (size_t i = 0; i < sizeof(magic); ++i)
        if (magic[i] != kCheckpointMagic[i]) throw DataError("not a checkpoint file: " + path.string());
    uint32_t version = 0;
    read_exact(in, &version, sizeof(version), path);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
    uint64_t header_len = 0;
    read_exact(in, &header_len, sizeof(header_len), path);
    if (header_len == 0 || header_len > (uint64_t{1} << 30))
        throw DataError("implausible checkpoint header length: " + path.string());
    std::string text(header_len, '\0');
    read_exact(in, text.data(), header_len, path);
    nlohmann::json header = nlohmann::json::parse(text, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw DataError("corrupt checkpoint header: " + path.string());
    return header;
}

inline std::ifstream open_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path.string());
    return in;
}

inline void require_kind(const nlohmann::json& header, const std::string& expected,
                         const std::filesystem::path& path) {
    std::string kind = header.value("kind", std::string("?"));
    if (kind != expected)
        throw DataError("expected " + expected + " checkpoint, found \"" + kind + "\": " + path.string());
}

// Fills preallocated tensors from the blob section, enforcing that the
// header's tensor table matches the shapes implied by the config.
inline void read_tensors(std::ifstream& in, const nlohmann::json& header,
                         const std::vector<TensorView>& expected, std::vector<TensorRef> refs,
                         const std::filesystem::path& path) {
    const nlohmann::json& table = header.at("tensors");
    if (!table.is_array() || table.size() != expected.size())
        throw DataError("checkpoint tensor table does not match its config: " + path.string());
    for (size_t i = 0; i < expected.size(); ++i) {
        const nlohmann::json& row = table.at(i);
        if (row.at("name") != expected[i].name || row.at("rows") != expected[i].rows ||
            row.at("cols") != expected[i].cols)
            throw DataError("checkpoint tensor \"" + row.at("name").get<std::string>() +
                            "\" does not match its config: " + path.string());
        read_exact(in, refs[i].data, refs[i].size * sizeof(double), path);
    }
    in.peek();
    if (!in.eof()) throw DataError("trailing bytes after tensor data: " + path.string());
}

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
    return {{"d_model", cfg.d_model}, {"n_heads", cfg.n_heads},   {"n_layers", cfg.n_layers},
            {"ffn_dim", cfg.ffn_dim}, {"max_seq", cfg.max_seq},   {"vocab_size", cfg.vocab_size},
            {"rope_base", cfg.rope_base}, {"norm_eps", cfg.norm_eps}};
}

inline ModelConfig model_config_from_header(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.ffn_dim = j.at("ffn_dim").get<int>();
    cfg.max_seq = j.at("max_seq").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.rope_base = j.at("rope_base").get<double>();
    cfg.norm_eps = j.at("norm_eps").get<double>();
    return cfg;
}

inline uint64_t parse_hex64(const std::string& s, const std::filesystem::path& path) {
    if (s.size() != 16) throw DataError("malformed hash in checkpoint header: " + path.string());
    return std::stoull(s, nullptr, 16);
}

}  // namespace detail

// Order-sensitive digest over tensor names and raw bytes. Any flipped bit,
// reshaped tensor, or reordered layer changes it.
inline uint64_t model_hash(const Parameters& p) {
    uint64_t h = fnv1a64(nullptr, 0);
    for (const detail::TensorView& t : detail::tensor_views(p)) {
        h = fnv1a64(t.name, h);
        h = fnv1a64(t.data, t.count() * sizeof(double), h);
    }
    return h;
}

struct ModelCheckpoint {
    ModelConfig config;
    Parameters params;
    uint64_t tokenizer_hash = 0;
    uint64_t rng_state = 0;
    int step = 0;
    NeftuneConfig noise;  // the noise settings the run trained with
};

inline void save_model_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                                  const Parameters& params, uint64_t tokenizer_hash,
                                  uint64_t rng_state, int step, const NeftuneConfig& noise) {
    std::vector<detail::TensorView> views = detail::tensor_views(params);
    nlohmann::json header = {{"kind", "model"},
                             {"config", detail::model_config_json(cfg)},
                             {"tokenizer_hash", hex64(tokenizer_hash)},
                             {"rng_state", rng_state},
                             {"step", step},
                             {"noise", {{"enabled", noise.enabled}, {"alpha", noise.alpha}, {"seed", noise.seed}}},
                             {"tensors", detail::tensor_index(views)}};
    detail::write_container(path, header, views);
}

inline void save_model_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
    save_model_checkpoint(path, ckpt.config, ckpt.params, ckpt.tokenizer_hash, ckpt.rng_state,
                          ckpt.step, ckpt.noise);
}

inline ModelCheckpoint load_model_checkpoint(const std::filesystem::path& path) {
    std::ifstream in = detail::open_checkpoint(path);
    nlohmann::json header = detail::read_header(in, path);
    detail::require_kind(header, "model", path);
    ModelCheckpoint ckpt;
    try {
        ckpt.config = detail::model_config_from_header(header.at("config"));
        ckpt.tokenizer_hash = detail::parse_hex64(header.at("tokenizer_hash").get<std::string>(), path);
        ckpt.rng_state = header.at("rng_state").get<uint64_t>();
        ckpt.step = header.at("step").get<int>();
        const nlohmann::json& noise = header.at("noise");
        ckpt.noise.enabled = noise.at("enabled").get<bool>();
        ckpt.noise.alpha = noise.at("alpha").get<double>();
        ckpt.noise.seed = noise.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint header (" + std::string(e.what()) + "): " + path.string());
    }
    try {
        ckpt.config.validate();
    } catch (const ConfigError& e) {
        throw DataError("checkpoint declares an invalid model config (" + std::string(e.what()) +
                        "): " + path.string());
    }
    ckpt.params = Parameters::zeros_like(ckpt.config);
    detail::read_tensors(in, header, detail::tensor_views(ckpt.params), tensor_refs(ckpt.params), path);
    return ckpt;
}

struct AdapterCheckpoint {
    LoraConfig config;
    LoraWeights weights;
    uint64_t base_model_hash = 0;
    uint64_t tokenizer_hash = 0;
    int step = 0;
};

inline void save_adapter_checkpoint(const std::filesystem::path& path, const LoraConfig& cfg,
                                    const LoraWeights& weights, uint64_t base_model_hash,
                                    uint64_t tokenizer_hash, int step) {
    if (weights.layers.empty()) throw ConfigError("save_adapter_checkpoint: adapter has no layers");
    std::vector<detail::TensorView> views = detail::tensor_views(weights);
    nlohmann::json header = {
        {"kind", "adapter"},
        {"lora", {{"rank", cfg.rank}, {"alpha", cfg.alpha}, {"dropout", cfg.dropout_p}, {"seed", cfg.seed}}},
        {"d_model", weights.layers[0].A.cols()},
        {"n_layers", weights.layers.size()},
        {"base_model_hash", hex64(base_model_hash)},
        {"tokenizer_hash", hex64(tokenizer_hash)},
        {"step", step},
        {"tensors", detail::tensor_index(views)}};
    detail::write_container(path, header, views);
}

inline void save_adapter_checkpoint(const std::filesystem::path& path, const AdapterCheckpoint& ckpt) {
    save_adapter_checkpoint(path, ckpt.config, ckpt.weights, ckpt.base_model_hash,
                            ckpt.tokenizer_hash, ckpt.step);
}

inline AdapterCheckpoint load_adapter_checkpoint(const std::filesystem::path& path) {
    std::ifstream in = detail::open_checkpoint(path);
    nlohmann::json header = detail::read_header(in, path);
    detail::require_kind(header, "adapter", path);
    AdapterCheckpoint ckpt;
    Eigen::Index d_model = 0;
    size_t n_layers = 0;
    try {
        const nlohmann::json& lora = header.at("lora");
        ckpt.config.rank = lora.at("rank").get<int>();
        ckpt.config.alpha = lora.at("alpha").get<double>();
        ckpt.config.dropout_p = lora.at("dropout").get<double>();
        ckpt.config.seed = lora.at("seed").get<uint64_t>();
        d_model = header.at("d_model").get<Eigen::Index>();
        n_layers = header.at("n_layers").get<size_t>();
        ckpt.base_model_hash = detail::parse_hex64(header.at("base_model_hash").get<std::string>(), path);
        ckpt.tokenizer_hash = detail::parse_hex64(header.at("tokenizer_hash").get<std::string>(), path);
        ckpt.step = header.at("step").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint header (" + std::string(e.what()) + "): " + path.string());
    }
    try {
        ckpt.config.validate();
    } catch (const ConfigError& e) {
        throw DataError("checkpoint declares an invalid adapter config (" + std::string(e.what()) +
                        "): " + path.string());
    }
    if (d_model < 1 || n_layers < 1)
        throw DataError("checkpoint declares an invalid adapter shape: " + path.string());
    ckpt.weights.scale = ckpt.config.alpha / static_cast<double>(ckpt.config.rank);
    ckpt.weights.dropout_p = ckpt.config.dropout_p;
    ckpt.weights.dropout_seed = ckpt.config.seed;
    ckpt.weights.layers.resize(n_layers);
    for (LoraLayerWeights& lw : ckpt.weights.layers) {
        lw.A = Mat::Zero(ckpt.config.rank, d_model);
        lw.B = Mat::Zero(3 * d_model, ckpt.config.rank);
    }
    detail::read_tensors(in, header, detail::tensor_views(ckpt.weights), tensor_refs(ckpt.weights), path);
    return ckpt;
}

// Reattaches saved factors to the base model they were trained against.
inline LoraAdapter restore_adapter(const AdapterCheckpoint& ckpt, const Parameters& base) {
    uint64_t base_hash = model_hash(base);
    if (base_hash != ckpt.base_model_hash)
        throw ConfigError("adapter was trained against a different base model (expected " +
                          hex64(ckpt.base_model_hash) + ", got " + hex64(base_hash) + ")");
    if (base.layers.size() != ckpt.weights.layers.size() ||
        base.layers[0].fused_qkv.rows() != ckpt.weights.layers[0].A.cols())
        throw ConfigError("adapter shapes do not match the base model");
    LoraAdapter adapter;
    adapter.config = ckpt.config;
    adapter.weights = ckpt.weights;
    adapter.consumed = false;
    return adapter;
}

// Peeks at a container's kind ("model" or "adapter") without loading tensors.
inline std::string checkpoint_kind(const std::filesystem::path& path) {
    std::ifstream in = detail::open_checkpoint(path);
    nlohmann::json header = detail::read_header(in, path);
    std::string kind = header.value("kind", std::string());
    if (kind != "model" && kind != "adapter")
        throw DataError("checkpoint has unknown kind: " + path.string());
    return kind;
}

}  // namespace sumtune
