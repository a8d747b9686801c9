#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <random>
#include <string>
#include <vector>

#include "sumtune/tokenizer.hpp"

using namespace sumtune;

namespace {

// Reference pair counter: counts adjacent unit pairs over the byte units of a
// pre-tokenized corpus, independent of the trainer's bookkeeping.
std::map<std::pair<std::string, std::string>, int> brute_force_pair_counts(const std::vector<std::string>& corpus) {
    std::map<std::pair<std::string, std::string>, int> counts;
    for (const std::string& text : corpus) {
        for (const std::string& piece : pre_tokenize(text)) {
            for (size_t i = 0; i + 1 < piece.size(); ++i) {
                counts[{std::string(1, piece[i]), std::string(1, piece[i + 1])}] += 1;
            }
        }
    }
    return counts;
}

size_t corpus_token_count(const TokenizerModel& model, const std::vector<std::string>& corpus) {
    size_t total = 0;
    for (const std::string& text : corpus) total += model.encode(text).size();
    return total;
}

std::string merge_left(const TokenizerModel& model, size_t rank) {
    return model.token_string(model.merges().at(rank).left);
}
std::string merge_right(const TokenizerModel& model, size_t rank) {
    return model.token_string(model.merges().at(rank).right);
}

constexpr size_t kBase = 259;  // 256 bytes + bos/eos/pad

}  // namespace

TEST_CASE("pre-tokenization attaches whitespace to the following piece and isolates digits") {
    CHECK(pre_tokenize("hello world") == std::vector<std::string>{"hello", " world"});
    CHECK(pre_tokenize(" 2024") == std::vector<std::string>{" ", "2", "0", "2", "4"});
    CHECK(pre_tokenize("a  b") == std::vector<std::string>{"a", "  b"});
    CHECK(pre_tokenize("hi ") == std::vector<std::string>{"hi", " "});
    CHECK(pre_tokenize("ab12cd") == std::vector<std::string>{"ab", "1", "2", "cd"});
    CHECK(pre_tokenize("a \n b") == std::vector<std::string>{"a", " \n b"});
    CHECK(pre_tokenize("价格2024") == std::vector<std::string>{"价格", "2", "0", "2", "4"});
    CHECK(pre_tokenize("") == std::vector<std::string>{});
}

TEST_CASE("training on a repeated letter learns the single expected merge") {
    TokenizerModel model = train_bpe({"aaaa"}, kBase + 1);
    REQUIRE(model.merge_count() == 1);
    CHECK(merge_left(model, 0) == "a");
    CHECK(merge_right(model, 0) == "a");
    CHECK(model.token_id("aa") >= 0);

    std::vector<int> ids = model.encode("aaaa");
    REQUIRE(ids.size() == 2);
    CHECK(model.token_string(ids[0]) == "aa");
    CHECK(model.token_string(ids[1]) == "aa");
    CHECK(model.decode(ids) == "aaaa");
    CHECK(model.compression_rate({"aaaa"}) == Catch::Approx(0.5));
}

TEST_CASE("zero merges leaves base bytes plus specials") {
    TokenizerModel model = train_bpe({"ab"}, kBase);
    CHECK(model.vocab_size() == kBase);
    CHECK(model.merge_count() == 0);
    std::vector<int> ids = model.encode("ab");
    CHECK(ids.size() == 2);
}

TEST_CASE("merges are ordered by descending pair frequency") {
    std::vector<std::string> corpus = {"abab", "ab"};
    auto counts = brute_force_pair_counts(corpus);
    CHECK(counts[{"a", "b"}] == 3);
    CHECK(counts[{"b", "a"}] == 1);

    TokenizerModel model = train_bpe(corpus, kBase + 2);
    REQUIRE(model.merge_count() == 2);
    CHECK(merge_left(model, 0) == "a");
    CHECK(merge_right(model, 0) == "b");
    CHECK(merge_left(model, 1) == "ab");
    CHECK(merge_right(model, 1) == "ab");

    std::vector<int> ids = model.encode("abab");
    REQUIRE(ids.size() == 1);
    CHECK(model.token_string(ids[0]) == "abab");
}

TEST_CASE("frequency ties break toward the lexicographically smallest pair") {
    TokenizerModel model = train_bpe({"cd", "ab"}, kBase + 1);
    REQUIRE(model.merge_count() == 1);
    CHECK(merge_left(model, 0) == "a");
    CHECK(merge_right(model, 0) == "b");
}

TEST_CASE("digits always encode as single-digit tokens") {
    std::vector<std::string> corpus = {"2024 2024 2024", "price 2024 price 12345", "价格 99 元"};
    TokenizerModel model = train_bpe(corpus, kBase + 40);

    for (size_t id = kBase; id < model.vocab_size(); ++id) {
        for (char c : model.token_string(static_cast<int>(id))) {
            INFO("learned token contains digit: " << model.token_string(static_cast<int>(id)));
            CHECK(!is_ascii_digit(c));
        }
    }

    for (const std::string& text : {std::string("year 2024 and 12345"), corpus[0], corpus[1]}) {
        for (int id : model.encode(text)) {
            const std::string& tok = model.token_string(id);
            size_t digits = 0;
            for (char c : tok) digits += is_ascii_digit(c) ? 1 : 0;
            CHECK(digits <= 1);
            if (digits == 1) CHECK(tok.size() == 1);
        }
    }
}

TEST_CASE("empty text with boundary flags yields exactly the boundary ids") {
    TokenizerModel model = train_bpe({"ab"}, kBase);
    std::vector<int> ids = model.encode("", true, true);
    REQUIRE(ids == std::vector<int>{model.bos_id(), model.eos_id()});
    CHECK(model.decode(ids, true).empty());
    CHECK(model.decode(ids) == "<s></s>");
}

TEST_CASE("special-token strings are matched inline") {
    TokenizerModel model = train_bpe({"ab"}, kBase);
    std::vector<int> ids = model.encode("a<s>b</s>");
    REQUIRE(ids.size() == 4);
    CHECK(ids[1] == model.bos_id());
    CHECK(ids[3] == model.eos_id());
    CHECK(model.decode(ids) == "a<s>b</s>");
    CHECK(model.decode(ids, true) == "ab");
}

TEST_CASE("roundtrip holds for random mixed-script strings") {
    std::vector<std::string> corpus = {"客服: 你好，请问有什么可以帮您？", "用户: 我想查询订单 20240115 的物流。",
                                       "the quick brown fox jumps over 13 lazy dogs",
                                       "Simon: see you at 10, bring snacks!"};
    TokenizerModel model = train_bpe(corpus, kBase + 60);

    std::vector<std::string> pools = {"abcdefghijklmnopqrstuvwxyz", "ABCXYZ", "0123456789", " \t\n", ",.!?:;"};
    std::vector<std::string> wide = {"价", "格", "客", "服", "用", "户", "摘", "要", "，", "。", "😀", "🚀", "é", "ß"};
    std::mt19937_64 rng(20240819);
    for (int trial = 0; trial < 1000; ++trial) {
        std::string s;
        size_t len = rng() % 41;
        for (size_t i = 0; i < len; ++i) {
            if (rng() % 3 == 0) {
                s += wide[rng() % wide.size()];
            } else {
                const std::string& pool = pools[rng() % pools.size()];
                s += pool[rng() % pool.size()];
            }
        }
        INFO("string: " << s);
        REQUIRE(model.decode(model.encode(s)) == s);
        std::vector<int> wrapped = model.encode(s, true, true);
        REQUIRE(model.decode(wrapped, true) == s);
    }
}

TEST_CASE("larger vocabularies never worsen token counts on the training corpus") {
    std::vector<std::string> corpus = {"客服: 有什么可以帮您", "用户: 物流到哪里了", "客服: 正在派送中",
                                       "thanks for the update", "see you tomorrow then"};
    TokenizerModel small = train_bpe(corpus, kBase + 10);
    TokenizerModel big = train_bpe(corpus, kBase + 50);
    CHECK(corpus_token_count(big, corpus) <= corpus_token_count(small, corpus));
}

TEST_CASE("training is deterministic") {
    std::vector<std::string> corpus = {"abcabc abc", "价格 价格", "xyxy xy zzz"};
    TokenizerModel a = train_bpe(corpus, kBase + 25);
    TokenizerModel b = train_bpe(corpus, kBase + 25);
    CHECK(a.to_json().dump() == b.to_json().dump());
    CHECK(a.hash() == b.hash());
}

TEST_CASE("json save and load preserve the model exactly") {
    std::vector<std::string> corpus = {"客服: 你好 2024", "用户: 价格多少", "mixed ascII and 中文 bytes"};
    TokenizerModel model = train_bpe(corpus, kBase + 30);

    auto path = std::filesystem::temp_directory_path() / "sumtune_tok_test.json";
    model.save(path);
    TokenizerModel loaded = TokenizerModel::load(path);
    CHECK(loaded.to_json().dump() == model.to_json().dump());
    CHECK(loaded.hash() == model.hash());
    for (const std::string& text : corpus) {
        CHECK(loaded.encode(text, true, true) == model.encode(text, true, true));
    }
    std::filesystem::remove(path);
}

TEST_CASE("char-level model errors on unknown characters instead of falling back") {
    TokenizerModel model = train_bpe({"价格价格"}, 6, {"<s>", "</s>", "<pad>"}, true);
    CHECK(!model.byte_fallback());
    CHECK(model.vocab_size() == 6);  // 3 specials + 价 + 格 + merged 价格
    std::vector<int> ids = model.encode("价格");
    REQUIRE(ids.size() == 1);
    CHECK(model.token_string(ids[0]) == "价格");
    CHECK_THROWS_AS(model.encode("x"), DataError);
}

TEST_CASE("one-token-per-character model has compression rate 1") {
    TokenizerModel model = train_bpe({"abc def"}, kBase);
    CHECK(model.compression_rate({"abc", "def"}) == Catch::Approx(1.0));
}

TEST_CASE("input validation raises typed errors") {
    CHECK_THROWS_AS(train_bpe({}, 300), DataError);
    CHECK_THROWS_AS(train_bpe({""}, 300), DataError);
    CHECK_THROWS_AS(train_bpe({"ab"}, 10), ConfigError);

    TokenizerModel model = train_bpe({"ab"}, kBase);
    CHECK_THROWS_AS(model.token_string(100000), DataError);
    CHECK_THROWS_AS(model.decode({100000}), DataError);
    CHECK_THROWS_AS(model.compression_rate({}), DataError);
}

TEST_CASE("loading rejects malformed tokenizer files") {
    auto path = std::filesystem::temp_directory_path() / "sumtune_tok_bad.json";
    write_file(path, "not json at all");
    CHECK_THROWS_AS(TokenizerModel::load(path), DataError);
    write_file(path, "{\"vocab\": {}}");
    CHECK_THROWS_AS(TokenizerModel::load(path), DataError);
    std::filesystem::remove(path);
}
