#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>

#include "sumtune/checkpoint.hpp"

using namespace sumtune;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.ffn_dim = 12;
    cfg.max_seq = 16;
    cfg.vocab_size = 11;
    return cfg;
}

bool bits_equal(const Parameters& a, const Parameters& b) {
    auto va = detail::tensor_views(a);
    auto vb = detail::tensor_views(b);
    if (va.size() != vb.size()) return false;
    for (size_t i = 0; i < va.size(); ++i) {
        if (va[i].name != vb[i].name || va[i].rows != vb[i].rows || va[i].cols != vb[i].cols)
            return false;
        if (std::memcmp(va[i].data, vb[i].data, va[i].count() * sizeof(double)) != 0) return false;
    }
    return true;
}

bool bits_equal(const LoraWeights& a, const LoraWeights& b) {
    auto va = detail::tensor_views(a);
    auto vb = detail::tensor_views(b);
    if (va.size() != vb.size()) return false;
    for (size_t i = 0; i < va.size(); ++i) {
        if (va[i].name != vb[i].name || va[i].rows != vb[i].rows || va[i].cols != vb[i].cols)
            return false;
        if (std::memcmp(va[i].data, vb[i].data, va[i].count() * sizeof(double)) != 0) return false;
    }
    return true;
}

fs::path test_dir() {
    fs::path dir = fs::temp_directory_path() / "sumtune_ckpt_test";
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("model checkpoint round trip is bit exact") {
    ModelConfig cfg = small_config();
    Parameters params = Parameters::init(cfg, 7);
    // Values raw-byte serialization must survive unchanged.
    params.token_embedding(0, 0) = -0.0;
    params.token_embedding(0, 1) = 5e-324;
    params.token_embedding(0, 2) = 1e308;
    params.token_embedding(1, 0) = std::numeric_limits<double>::quiet_NaN();

    NeftuneConfig noise;
    noise.enabled = true;
    noise.alpha = 5.0;
    noise.seed = 99;

    fs::path path = test_dir() / "model.ckpt";
    save_model_checkpoint(path, cfg, params, 0xdeadbeefcafe1234ULL,
                          0xffffffffffffffffULL, 4242, noise);
    ModelCheckpoint loaded = load_model_checkpoint(path);

    CHECK(loaded.config.d_model == cfg.d_model);
    CHECK(loaded.config.n_heads == cfg.n_heads);
    CHECK(loaded.config.n_layers == cfg.n_layers);
    CHECK(loaded.config.ffn_dim == cfg.ffn_dim);
    CHECK(loaded.config.max_seq == cfg.max_seq);
    CHECK(loaded.config.vocab_size == cfg.vocab_size);
    CHECK(loaded.config.rope_base == cfg.rope_base);
    CHECK(loaded.config.norm_eps == cfg.norm_eps);
    CHECK(bits_equal(loaded.params, params));
    CHECK(std::isnan(loaded.params.token_embedding(1, 0)));
    CHECK(std::signbit(loaded.params.token_embedding(0, 0)));
    CHECK(loaded.params.token_embedding(0, 1) == 5e-324);
    CHECK(loaded.tokenizer_hash == 0xdeadbeefcafe1234ULL);
    CHECK(loaded.rng_state == 0xffffffffffffffffULL);
    CHECK(loaded.step == 4242);
    CHECK(loaded.noise.enabled);
    CHECK(loaded.noise.alpha == 5.0);
    CHECK(loaded.noise.seed == 99);
    CHECK(checkpoint_kind(path) == "model");

    // Saving the loaded copy reproduces the file byte for byte.
    fs::path again = test_dir() / "model_again.ckpt";
    save_model_checkpoint(again, loaded);
    CHECK(read_file(again) == read_file(path));
}

TEST_CASE("model hash tracks content and placement") {
    ModelConfig cfg = small_config();
    Parameters a = Parameters::init(cfg, 1);
    Parameters b = Parameters::init(cfg, 1);
    Parameters c = Parameters::init(cfg, 2);
    CHECK(model_hash(a) == model_hash(b));
    CHECK(model_hash(a) != model_hash(c));

    Parameters flipped = a;
    flipped.layers[1].down_w(3, 2) = -flipped.layers[1].down_w(3, 2);
    CHECK(model_hash(flipped) != model_hash(a));

    // Same bytes moved between equally shaped tensors counts as a change.
    Parameters swapped = a;
    std::swap(swapped.layers[0].gate_w, swapped.layers[0].up_w);
    CHECK(model_hash(swapped) != model_hash(a));
}

TEST_CASE("adapter checkpoint round trips and reattaches") {
    ModelConfig cfg = small_config();
    Parameters base = Parameters::init(cfg, 3);

    LoraConfig lcfg;
    lcfg.rank = 3;
    lcfg.alpha = 6.0;
    lcfg.dropout_p = 0.25;
    lcfg.seed = 11;
    LoraAdapter adapter = attach(base, lcfg);
    Rng rng(21);
    for (LoraLayerWeights& lw : adapter.weights.layers)
        for (Eigen::Index r = 0; r < lw.B.rows(); ++r)
            for (Eigen::Index col = 0; col < lw.B.cols(); ++col)
                lw.B(r, col) = normal_real(rng, 0.0, 0.1);

    fs::path path = test_dir() / "adapter.ckpt";
    save_adapter_checkpoint(path, lcfg, adapter.weights, model_hash(base), 77, 500);
    AdapterCheckpoint loaded = load_adapter_checkpoint(path);

    CHECK(loaded.config.rank == 3);
    CHECK(loaded.config.alpha == 6.0);
    CHECK(loaded.config.dropout_p == 0.25);
    CHECK(loaded.config.seed == 11);
    CHECK(loaded.weights.scale == 2.0);
    CHECK(loaded.weights.dropout_p == 0.25);
    CHECK(loaded.weights.dropout_seed == 11);
    CHECK(loaded.base_model_hash == model_hash(base));
    CHECK(loaded.tokenizer_hash == 77);
    CHECK(loaded.step == 500);
    CHECK(bits_equal(loaded.weights, adapter.weights));
    CHECK(checkpoint_kind(path) == "adapter");

    LoraAdapter restored = restore_adapter(loaded, base);
    CHECK_FALSE(restored.consumed);
    CHECK(restored.config.rank == 3);
    CHECK(bits_equal(restored.weights, adapter.weights));

    Parameters other = Parameters::init(cfg, 4);
    CHECK_THROWS_MATCHES(restore_adapter(loaded, other), ConfigError,
                         MessageMatches(ContainsSubstring("different base model")));
}

TEST_CASE("container rejects damaged and mismatched files") {
    ModelConfig cfg = small_config();
    Parameters params = Parameters::init(cfg, 9);
    NeftuneConfig noise;
    fs::path dir = test_dir();
    fs::path model_path = dir / "taxonomy_model.ckpt";
    fs::path adapter_path = dir / "taxonomy_adapter.ckpt";
    save_model_checkpoint(model_path, cfg, params, 1, 2, 3, noise);

    LoraConfig lcfg;
    lcfg.rank = 2;
    LoraAdapter adapter = attach(params, lcfg);
    save_adapter_checkpoint(adapter_path, lcfg, adapter.weights, model_hash(params), 1, 3);

    std::string good = read_file(model_path);
    auto corrupt = [&](const std::string& bytes) {
        fs::path p = dir / "corrupt.ckpt";
        write_file(p, bytes);
        return p;
    };

    SECTION("missing file") {
        CHECK_THROWS_MATCHES(load_model_checkpoint(dir / "absent.ckpt"), DataError,
                             MessageMatches(ContainsSubstring("cannot open")));
    }
    SECTION("wrong magic") {
        std::string bad = good;
        bad[0] = 'X';
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt(bad)), DataError,
                             MessageMatches(ContainsSubstring("not a checkpoint file")));
    }
    SECTION("short file") {
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt("SUM")), DataError,
                             MessageMatches(ContainsSubstring("truncated")));
    }
    SECTION("unsupported version") {
        std::string bad = good;
        bad[8] = 2;
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt(bad)), DataError,
                             MessageMatches(ContainsSubstring("unsupported checkpoint version 2")));
    }
    SECTION("truncation at every stage") {
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt(good.substr(0, 15))), DataError,
                             MessageMatches(ContainsSubstring("truncated")));
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt(good.substr(0, 25))), DataError,
                             MessageMatches(ContainsSubstring("truncated")));
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt(good.substr(0, good.size() - 7))),
                             DataError, MessageMatches(ContainsSubstring("truncated")));
    }
    SECTION("trailing bytes") {
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt(good + "x")), DataError,
                             MessageMatches(ContainsSubstring("trailing bytes")));
    }
    SECTION("corrupt header json") {
        std::string bad = good;
        bad[20] = 'X';  // first byte of the JSON header
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt(bad)), DataError,
                             MessageMatches(ContainsSubstring("corrupt checkpoint header")));
    }
    SECTION("kind mismatch both ways") {
        CHECK_THROWS_MATCHES(load_adapter_checkpoint(model_path), DataError,
                             MessageMatches(ContainsSubstring("expected adapter checkpoint")));
        CHECK_THROWS_MATCHES(load_model_checkpoint(adapter_path), DataError,
                             MessageMatches(ContainsSubstring("expected model checkpoint")));
    }
    SECTION("header config disagrees with tensor table") {
        std::string bad = good;
        size_t at = bad.find("\"d_model\":8");
        REQUIRE(at != std::string::npos);
        bad[at + 10] = '4';
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt(bad)), DataError,
                             MessageMatches(ContainsSubstring("does not match its config")));
    }
    SECTION("header declaring an invalid config") {
        std::string bad = good;
        size_t at = bad.find("\"n_heads\":2");
        REQUIRE(at != std::string::npos);
        bad[at + 10] = '5';  // 8 % 5 != 0
        CHECK_THROWS_MATCHES(load_model_checkpoint(corrupt(bad)), DataError,
                             MessageMatches(ContainsSubstring("invalid model config")));
    }
    SECTION("unwritable target") {
        CHECK_THROWS_MATCHES(
            save_model_checkpoint("/nonexistent_dir_for_ckpt/m.ckpt", cfg, params, 0, 0, 0, noise),
            DataError, MessageMatches(ContainsSubstring("cannot write")));
    }
    SECTION("kind probe") {
        CHECK(checkpoint_kind(model_path) == "model");
        CHECK(checkpoint_kind(adapter_path) == "adapter");
        CHECK_THROWS_AS(checkpoint_kind(corrupt("SUMTCKPTxxxxxxxxxxxx")), DataError);
    }
}

TEST_CASE("file layout starts with the documented magic") {
    ModelConfig cfg = small_config();
    Parameters params = Parameters::init(cfg, 5);
    fs::path path = test_dir() / "magic.ckpt";
    save_model_checkpoint(path, cfg, params, 0, 0, 0, NeftuneConfig{});
    std::string bytes = read_file(path);
    REQUIRE(bytes.size() > 20);
    CHECK(bytes.substr(0, 8) == "SUMTCKPT");
    uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 8, sizeof(version));
    CHECK(version == kCheckpointVersion);
    uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + 12, sizeof(header_len));
    CHECK(20 + header_len < bytes.size());
    CHECK(bytes[20] == '{');
}
