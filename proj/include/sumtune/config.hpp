#pragma once
// One nested JSON run configuration covering every module, with defaults,
// model-size presets, dotted-path flag overrides, and strict unknown-key
// rejection. Precedence per leaf: flag > config file > default. Also the
// run-directory provenance manifest and single-writer lock file.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "corpus.hpp"
#include "decode.hpp"
#include "lora.hpp"
#include "neftune.hpp"
#include "tokenizer.hpp"
#include "trainer.hpp"

namespace sumtune {

inline constexpr const char* kToolVersion = "0.1.0";

inline nlohmann::json default_run_json() {
    return {
        {"tokenizer", {{"vocab_size", 1024}, {"char_level", false}}},
        {"data",
         {{"dataset", "csds"}, {"max_len", 512}, {"prompt_loss", false}, {"boundary", "distinct"}}},
        {"model",
         {{"preset", "desk"},
          {"d_model", 128},
          {"n_heads", 4},
          {"n_layers", 4},
          {"ffn_dim", 344},
          {"max_seq", 512},
          {"rope_base", 10000.0},
          {"norm_eps", 1e-6},
          {"init_seed", 0}}},
        {"lora", {{"enabled", true}, {"rank", 9}, {"alpha", 18.0}, {"dropout", 0.1}, {"seed", 0}}},
        {"neftune", {{"enabled", true}, {"alpha", 5.0}, {"seed", 0}}},
        {"train",
         {{"learning_rate", 5e-5},
          {"iterations", 9000},
          {"batch_size", 2},
          {"accumulation_steps", 4},
          {"clip_theta", 1.0},
          {"seed", 0},
          {"checkpoint_every", 1000},
          {"stop_loss", 0.0},
          {"threads", 1}}},
        {"decode",
         {{"strategy", "greedy"},
          {"beam_size", 1},
          {"temperature", 1.0},
          {"top_p", 1.0},
          {"max_new_tokens", 64},
          {"stop_token", 1}}},
        {"eval", {{"last_k", 3}, {"embed", "model"}}},
    };
}

inline void expand_model_preset(nlohmann::json& model_section, const std::string& preset) {
    if (preset == "desk") {
        model_section["d_model"] = 128;
        model_section["n_heads"] = 4;
        model_section["n_layers"] = 4;
        model_section["ffn_dim"] = 344;
        model_section["max_seq"] = 512;
    } else if (preset == "paper") {
        model_section["d_model"] = 4096;
        model_section["n_heads"] = 32;
        model_section["n_layers"] = 32;
        model_section["ffn_dim"] = 11008;
        model_section["max_seq"] = 4096;
    } else {
        throw ConfigError("model.preset: unknown preset \"" + preset + "\" (expected desk or paper)");
    }
    model_section["preset"] = preset;
}

namespace detail {

inline bool json_types_compatible(const nlohmann::json& a, const nlohmann::json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

// Every key in `user` must already exist in `doc`; objects recurse, leaves
// replace. Unknown or mistyped keys are reported by their dotted path.
inline void merge_config(nlohmann::json& doc, const nlohmann::json& user, const std::string& path) {
    if (!user.is_object()) throw ConfigError("config" + (path.empty() ? "" : " at " + path) + ": expected an object");
    for (auto it = user.begin(); it != user.end(); ++it) {
        std::string key_path = path.empty() ? it.key() : path + "." + it.key();
        if (!doc.contains(it.key())) throw ConfigError("unknown config key: " + key_path);
        nlohmann::json& slot = doc[it.key()];
        if (slot.is_object()) {
            merge_config(slot, it.value(), key_path);
        } else {
            if (!json_types_compatible(slot, it.value()))
                throw ConfigError("config key " + key_path + ": expected " + std::string(slot.type_name()) +
                                  ", got " + std::string(it.value().type_name()));
            slot = it.value();
        }
    }
}

inline nlohmann::json parse_override_value(const std::string& raw) {
    nlohmann::json parsed = nlohmann::json::parse(raw, nullptr, false);
    if (!parsed.is_discarded() && !parsed.is_object() && !parsed.is_array()) return parsed;
    return nlohmann::json(raw);  // bare words become strings
}

}  // namespace detail

// Overrides are (dotted.path, value) pairs from --set flags.
inline nlohmann::json build_run_json(const nlohmann::json& user_file,
                                     const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
    nlohmann::json doc = default_run_json();
    // A braced {} argument and an empty config file both arrive as null.
    nlohmann::json user = user_file.is_null() ? nlohmann::json::object() : user_file;
    if (user.contains("model") && user.at("model").is_object() && user.at("model").contains("preset")) {
        const nlohmann::json& preset = user.at("model").at("preset");
        if (!preset.is_string()) throw ConfigError("model.preset: expected a string");
        expand_model_preset(doc["model"], preset.get<std::string>());
    }
    detail::merge_config(doc, user, "");
    for (const auto& [path, value] : overrides)
        if (path == "model.preset") expand_model_preset(doc["model"], value);
    for (const auto& [path, value] : overrides) {
        if (path == "model.preset") continue;  // already expanded
        nlohmann::json leaf = detail::parse_override_value(value);
        nlohmann::json patch = leaf;
        size_t end = path.size();
        while (true) {
            size_t dot = path.rfind('.', end - 1);
            std::string key = path.substr(dot == std::string::npos ? 0 : dot + 1, end - (dot == std::string::npos ? 0 : dot + 1));
            if (key.empty()) throw ConfigError("malformed override path: " + path);
            patch = nlohmann::json{{key, std::move(patch)}};
            if (dot == std::string::npos) break;
            if (dot == 0) throw ConfigError("malformed override path: " + path);
            end = dot;
        }
        detail::merge_config(doc, patch, "");
    }
    return doc;
}

struct RunConfig {
    int tokenizer_vocab = 1024;
    bool tokenizer_char_level = false;

    DatasetTag dataset = DatasetTag::csds;
    size_t max_len = 512;
    bool prompt_loss = false;
    BoundaryMode boundary = BoundaryMode::distinct;

    std::string model_preset = "desk";
    ModelConfig model;  // vocab_size is filled in from the tokenizer at use time
    uint64_t init_seed = 0;

    bool lora_enabled = true;
    LoraConfig lora;

    NeftuneConfig neftune;
    TrainConfig train;
    DecodeConfig decode;

    int eval_last_k = 3;
    std::string eval_embed = "model";

    nlohmann::json json;  // the fully merged document this config was built from
};

inline RunConfig run_config_from_json(const nlohmann::json& doc) {
    RunConfig rc;
    rc.json = doc;
    const nlohmann::json& tok = doc.at("tokenizer");
    rc.tokenizer_vocab = tok.at("vocab_size").get<int>();
    rc.tokenizer_char_level = tok.at("char_level").get<bool>();
    if (rc.tokenizer_vocab < 4) throw ConfigError("tokenizer.vocab_size: must cover specials and content");

    const nlohmann::json& data = doc.at("data");
    rc.dataset = dataset_tag_from(data.at("dataset").get<std::string>());
    rc.max_len = data.at("max_len").get<size_t>();
    rc.prompt_loss = data.at("prompt_loss").get<bool>();
    std::string boundary = data.at("boundary").get<std::string>();
    if (boundary == "distinct") {
        rc.boundary = BoundaryMode::distinct;
    } else if (boundary == "paper_literal") {
        rc.boundary = BoundaryMode::paper_literal;
    } else {
        throw ConfigError("data.boundary: expected distinct or paper_literal");
    }
    if (rc.max_len < 2) throw ConfigError("data.max_len: too small to hold any sample");

    const nlohmann::json& model = doc.at("model");
    rc.model_preset = model.at("preset").get<std::string>();
    rc.model.d_model = model.at("d_model").get<int>();
    rc.model.n_heads = model.at("n_heads").get<int>();
    rc.model.n_layers = model.at("n_layers").get<int>();
    rc.model.ffn_dim = model.at("ffn_dim").get<int>();
    rc.model.max_seq = model.at("max_seq").get<int>();
    rc.model.rope_base = model.at("rope_base").get<double>();
    rc.model.norm_eps = model.at("norm_eps").get<double>();
    rc.init_seed = model.at("init_seed").get<uint64_t>();
    {
        ModelConfig probe = rc.model;
        probe.vocab_size = 4;  // placeholder; the real vocab arrives with the tokenizer
        probe.validate();
    }

    const nlohmann::json& lora = doc.at("lora");
    rc.lora_enabled = lora.at("enabled").get<bool>();
    rc.lora.rank = lora.at("rank").get<int>();
    rc.lora.alpha = lora.at("alpha").get<double>();
    rc.lora.dropout_p = lora.at("dropout").get<double>();
    rc.lora.seed = lora.at("seed").get<uint64_t>();
    if (rc.lora_enabled) rc.lora.validate();

    const nlohmann::json& neftune = doc.at("neftune");
    rc.neftune.enabled = neftune.at("enabled").get<bool>();
    rc.neftune.alpha = neftune.at("alpha").get<double>();
    rc.neftune.seed = neftune.at("seed").get<uint64_t>();
    rc.neftune.validate();

    const nlohmann::json& train = doc.at("train");
    rc.train.learning_rate = train.at("learning_rate").get<double>();
    rc.train.iterations = train.at("iterations").get<int>();
    rc.train.batch_size = train.at("batch_size").get<int>();
    rc.train.accumulation_steps = train.at("accumulation_steps").get<int>();
    rc.train.clip_theta = train.at("clip_theta").get<double>();
    rc.train.seed = train.at("seed").get<uint64_t>();
    rc.train.checkpoint_every = train.at("checkpoint_every").get<int>();
    rc.train.stop_loss = train.at("stop_loss").get<double>();
    rc.train.threads = train.at("threads").get<int>();
    rc.train.validate();

    const nlohmann::json& decode = doc.at("decode");
    std::string strategy = decode.at("strategy").get<std::string>();
    if (strategy == "greedy") {
        rc.decode.strategy = DecodeStrategy::greedy;
    } else if (strategy == "beam") {
        rc.decode.strategy = DecodeStrategy::beam;
    } else if (strategy == "sample") {
        rc.decode.strategy = DecodeStrategy::sample;
    } else {
        throw ConfigError("decode.strategy: expected greedy, beam, or sample");
    }
    rc.decode.beam_size = decode.at("beam_size").get<int>();
    rc.decode.temperature = decode.at("temperature").get<double>();
    rc.decode.top_p = decode.at("top_p").get<double>();
    rc.decode.max_new_tokens = decode.at("max_new_tokens").get<int>();
    rc.decode.stop_token = decode.at("stop_token").get<int>();
    rc.decode.validate();

    const nlohmann::json& eval = doc.at("eval");
    rc.eval_last_k = eval.at("last_k").get<int>();
    rc.eval_embed = eval.at("embed").get<std::string>();
    if (rc.eval_last_k < 1) throw ConfigError("eval.last_k: must be at least 1");
    if (rc.eval_embed != "model" && rc.eval_embed != "none")
        throw ConfigError("eval.embed: expected model or none");
    return rc;
}

inline RunConfig load_run_config(const nlohmann::json& user_file,
                                 const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
    return run_config_from_json(build_run_json(user_file, overrides));
}

// Provenance manifest: the merged config plus a hash per input file. A run
// directory must be reconstructible from this file alone.
inline void write_manifest(const std::filesystem::path& run_dir, const nlohmann::json& config,
                           const std::vector<std::filesystem::path>& inputs) {
    nlohmann::json hashed = nlohmann::json::object();
    for (const std::filesystem::path& p : inputs) hashed[p.string()] = hex64(file_hash(p));
    nlohmann::json manifest = {{"tool_version", kToolVersion}, {"config", config}, {"inputs", hashed}};
    write_file(run_dir / "manifest.json", manifest.dump(2) + "\n");
}

// Single-writer guard for a run directory. Held for the process lifetime;
// a crash leaves the lock behind, which the error message explains.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& dir) : path_(dir / "run.lock") {
        std::filesystem::create_directories(dir);
        if (std::filesystem::exists(path_))
            throw DataError("run directory is locked (" + path_.string() +
                            " exists; remove it if no other run is active)");
        write_file(path_, "active\n");
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;
    ~RunLock() {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }

private:
    std::filesystem::path path_;
};

}  // namespace sumtune
