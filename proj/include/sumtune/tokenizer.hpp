#pragma once

// Trainable byte-pair-encoding tokenizer.
//
// Pre-tokenization: special-token strings are matched inline and kept atomic,
// whitespace attaches to the following pre-token, and every maximal run of
// ASCII digits is split into bare single-digit pre-tokens. Merges are learned
// per pre-token, so no learned token ever crosses a whitespace boundary or
// covers more than one digit.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sumtune/common.hpp"

namespace sumtune {

// ---------------------------------------------------------------------------
// Byte <-> printable-codepoint bijection for JSON persistence. Raw token
// strings are arbitrary byte sequences; mapping each byte to a printable
// codepoint keeps the saved vocabulary valid UTF-8 and reversible.
// ---------------------------------------------------------------------------

inline const std::array<uint32_t, 256>& byte_to_unicode_table() {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        std::array<bool, 256> keep{};
        for (int b = 33; b <= 126; ++b) keep[static_cast<size_t>(b)] = true;
        for (int b = 161; b <= 172; ++b) keep[static_cast<size_t>(b)] = true;
        for (int b = 174; b <= 255; ++b) keep[static_cast<size_t>(b)] = true;
        uint32_t next = 0;
        for (int b = 0; b < 256; ++b) {
            if (keep[static_cast<size_t>(b)]) {
                t[static_cast<size_t>(b)] = static_cast<uint32_t>(b);
            } else {
                t[static_cast<size_t>(b)] = 256 + next++;
            }
        }
        return t;
    }();
    return table;
}

inline std::string bytes_to_printable(const std::string& raw) {
    const auto& table = byte_to_unicode_table();
    std::string out;
    out.reserve(raw.size() * 2);
    for (unsigned char c : raw) append_utf8(out, table[c]);
    return out;
}

inline std::string printable_to_bytes(const std::string& printable) {
    static const std::unordered_map<uint32_t, unsigned char> reverse = [] {
        std::unordered_map<uint32_t, unsigned char> m;
        const auto& table = byte_to_unicode_table();
        for (int b = 0; b < 256; ++b) m[table[static_cast<size_t>(b)]] = static_cast<unsigned char>(b);
        return m;
    }();
    std::string out;
    for (uint32_t cp : utf8_codepoints(printable)) {
        auto it = reverse.find(cp);
        if (it == reverse.end()) throw DataError("tokenizer file contains an unmappable codepoint");
        out.push_back(static_cast<char>(it->second));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pre-tokenization
// ---------------------------------------------------------------------------

inline bool is_ascii_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_ascii_digit(char c) { return c >= '0' && c <= '9'; }

// Splits text into pre-tokens. A pre-token boundary opens at every transition
// from non-whitespace to whitespace (so whitespace leads the next pre-token),
// and digits are peeled off as bare single-character pre-tokens.
inline std::vector<std::string> pre_tokenize(const std::string& text) {
    std::vector<std::string> chunks;
    size_t start = 0;
    for (size_t i = 1; i < text.size(); ++i) {
        if (is_ascii_space(text[i]) && !is_ascii_space(text[i - 1])) {
            chunks.push_back(text.substr(start, i - start));
            start = i;
        }
    }
    if (start < text.size()) chunks.push_back(text.substr(start));

    std::vector<std::string> out;
    for (const std::string& chunk : chunks) {
        size_t pos = 0;
        size_t piece_start = 0;
        while (pos < chunk.size()) {
            if (is_ascii_digit(chunk[pos])) {
                if (pos > piece_start) out.push_back(chunk.substr(piece_start, pos - piece_start));
                out.push_back(chunk.substr(pos, 1));
                ++pos;
                piece_start = pos;
            } else {
                ++pos;
            }
        }
        if (piece_start < chunk.size()) out.push_back(chunk.substr(piece_start));
    }
    return out;
}

// ---------------------------------------------------------------------------
// TokenizerModel
// ---------------------------------------------------------------------------

class TokenizerModel {
  public:
    struct Merge {
        int left;
        int right;
        int product;
    };

    TokenizerModel() = default;

    int bos_id() const { return bos_id_; }
    int eos_id() const { return eos_id_; }
    int pad_id() const { return pad_id_; }
    bool byte_fallback() const { return byte_fallback_; }
    size_t vocab_size() const { return tokens_.size(); }
    size_t merge_count() const { return merges_.size(); }

    bool is_special(int id) const { return id == bos_id_ || id == eos_id_ || id == pad_id_; }

    const std::string& token_string(int id) const {
        if (id < 0 || static_cast<size_t>(id) >= tokens_.size())
            throw DataError("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<size_t>(id)];
    }

    int token_id(const std::string& token) const {
        auto it = token_ids_.find(token);
        return it == token_ids_.end() ? -1 : it->second;
    }

    const std::vector<Merge>& merges() const { return merges_; }

    std::vector<int> encode(const std::string& text, bool add_bos = false, bool add_eos = false) const {
        std::vector<int> ids;
        if (add_bos) ids.push_back(bos_id_);
        size_t pos = 0;
        size_t segment_start = 0;
        while (pos < text.size()) {
            int special = match_special(text, pos);
            if (special >= 0) {
                encode_segment(text.substr(segment_start, pos - segment_start), ids);
                ids.push_back(special);
                pos += tokens_[static_cast<size_t>(special)].size();
                segment_start = pos;
            } else {
                ++pos;
            }
        }
        encode_segment(text.substr(segment_start), ids);
        if (add_eos) ids.push_back(eos_id_);
        return ids;
    }

    std::string decode(const std::vector<int>& ids, bool skip_special = false) const {
        std::string out;
        for (int id : ids) {
            if (skip_special && is_special(id)) continue;
            out += token_string(id);
        }
        return out;
    }

    // Tokens per character over the corpus, specials excluded from the count.
    double compression_rate(const std::vector<std::string>& corpus) const {
        if (corpus.empty()) throw DataError("compression_rate: empty corpus");
        size_t tokens = 0;
        size_t chars = 0;
        for (const std::string& text : corpus) {
            for (int id : encode(text)) {
                if (!is_special(id)) ++tokens;
            }
            chars += count_codepoints(text);
        }
        if (chars == 0) throw DataError("compression_rate: corpus has no characters");
        return static_cast<double>(tokens) / static_cast<double>(chars);
    }

    nlohmann::json to_json() const {
        nlohmann::json vocab = nlohmann::json::object();
        for (size_t id = 0; id < tokens_.size(); ++id) {
            vocab[bytes_to_printable(tokens_[id])] = id;
        }
        nlohmann::json merges = nlohmann::json::array();
        for (const Merge& m : merges_) {
            merges.push_back({bytes_to_printable(tokens_[static_cast<size_t>(m.left)]),
                              bytes_to_printable(tokens_[static_cast<size_t>(m.right)])});
        }
        return nlohmann::json{{"vocab", vocab},
                              {"merges", merges},
                              {"special_tokens", {{"bos", bos_id_}, {"eos", eos_id_}, {"pad", pad_id_}}},
                              {"byte_fallback", byte_fallback_}};
    }

    static TokenizerModel from_json(const nlohmann::json& j) {
        TokenizerModel model;
        if (!j.contains("vocab") || !j.contains("merges") || !j.contains("special_tokens"))
            throw DataError("tokenizer file missing required fields");
        const auto& vocab = j.at("vocab");
        model.tokens_.assign(vocab.size(), std::string());
        std::vector<bool> seen(vocab.size(), false);
        for (auto it = vocab.begin(); it != vocab.end(); ++it) {
            int id = it.value().get<int>();
            if (id < 0 || static_cast<size_t>(id) >= vocab.size() || seen[static_cast<size_t>(id)])
                throw DataError("tokenizer vocab ids are not dense");
            seen[static_cast<size_t>(id)] = true;
            model.tokens_[static_cast<size_t>(id)] = printable_to_bytes(it.key());
        }
        for (size_t id = 0; id < model.tokens_.size(); ++id) {
            model.token_ids_[model.tokens_[id]] = static_cast<int>(id);
        }
        const auto& sp = j.at("special_tokens");
        model.bos_id_ = sp.at("bos").get<int>();
        model.eos_id_ = sp.at("eos").get<int>();
        model.pad_id_ = sp.at("pad").get<int>();
        for (int id : {model.bos_id_, model.eos_id_, model.pad_id_}) {
            if (id < 0 || static_cast<size_t>(id) >= model.tokens_.size())
                throw DataError("special token id out of range");
        }
        if (model.bos_id_ == model.eos_id_ || model.bos_id_ == model.pad_id_ || model.eos_id_ == model.pad_id_)
            throw DataError("special token ids must be distinct");
        model.byte_fallback_ = j.value("byte_fallback", true);
        for (const auto& pair : j.at("merges")) {
            if (!pair.is_array() || pair.size() != 2) throw DataError("tokenizer merge entry must be a pair");
            std::string left = printable_to_bytes(pair[0].get<std::string>());
            std::string right = printable_to_bytes(pair[1].get<std::string>());
            auto li = model.token_ids_.find(left);
            auto ri = model.token_ids_.find(right);
            auto pi = model.token_ids_.find(left + right);
            if (li == model.token_ids_.end() || ri == model.token_ids_.end() || pi == model.token_ids_.end())
                throw DataError("tokenizer merge references unknown token");
            if (model.is_special(li->second) || model.is_special(ri->second))
                throw DataError("tokenizer merge uses a special token");
            Merge m{li->second, ri->second, pi->second};
            uint64_t key = pair_key(m.left, m.right);
            if (!model.merge_rank_.count(key)) model.merge_rank_[key] = static_cast<int>(model.merges_.size());
            model.merges_.push_back(m);
        }
        model.rebuild_byte_ids();
        return model;
    }

    void save(const std::filesystem::path& path) const { write_file(path, to_json().dump(2) + "\n"); }

    static TokenizerModel load(const std::filesystem::path& path) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("tokenizer file is not valid JSON: " + std::string(e.what()));
        }
        return from_json(j);
    }

    uint64_t hash() const { return fnv1a64(to_json().dump()); }

  private:
    friend TokenizerModel train_bpe(const std::vector<std::string>&, size_t, const std::vector<std::string>&, bool);

    static uint64_t pair_key(int a, int b) {
        return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
    }

    void rebuild_byte_ids() {
        byte_ids_.fill(-1);
        for (int b = 0; b < 256; ++b) {
            auto it = token_ids_.find(std::string(1, static_cast<char>(b)));
            if (it != token_ids_.end() && !is_special(it->second)) byte_ids_[static_cast<size_t>(b)] = it->second;
        }
    }

    // Longest special-token string starting at pos, or -1.
    int match_special(const std::string& text, size_t pos) const {
        int best = -1;
        size_t best_len = 0;
        for (int id : {bos_id_, eos_id_, pad_id_}) {
            const std::string& tok = tokens_[static_cast<size_t>(id)];
            if (tok.size() > best_len && text.compare(pos, tok.size(), tok) == 0) {
                best = id;
                best_len = tok.size();
            }
        }
        return best;
    }

    void encode_segment(const std::string& segment, std::vector<int>& out) const {
        for (const std::string& piece : pre_tokenize(segment)) {
            std::vector<int> units = base_units(piece);
            apply_merges(units);
            out.insert(out.end(), units.begin(), units.end());
        }
    }

    std::vector<int> base_units(const std::string& piece) const {
        std::vector<int> units;
        if (byte_fallback_) {
            units.reserve(piece.size());
            for (unsigned char c : piece) units.push_back(byte_ids_[c]);
        } else {
            for (const std::string& ch : utf8_chars(piece)) {
                auto it = token_ids_.find(ch);
                if (it == token_ids_.end())
                    throw DataError("tokenizer has no byte fallback and no token for character \"" + ch + "\"");
                units.push_back(it->second);
            }
        }
        return units;
    }

    void apply_merges(std::vector<int>& units) const {
        while (units.size() >= 2) {
            int best_rank = std::numeric_limits<int>::max();
            for (size_t i = 0; i + 1 < units.size(); ++i) {
                auto it = merge_rank_.find(pair_key(units[i], units[i + 1]));
                if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
            }
            if (best_rank == std::numeric_limits<int>::max()) break;
            const Merge& m = merges_[static_cast<size_t>(best_rank)];
            std::vector<int> next;
            next.reserve(units.size());
            size_t i = 0;
            while (i < units.size()) {
                if (i + 1 < units.size() && units[i] == m.left && units[i + 1] == m.right) {
                    next.push_back(m.product);
                    i += 2;
                } else {
                    next.push_back(units[i]);
                    ++i;
                }
            }
            units = std::move(next);
        }
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> token_ids_;
    std::vector<Merge> merges_;
    std::unordered_map<uint64_t, int> merge_rank_;
    std::array<int, 256> byte_ids_{};
    int bos_id_ = 0;
    int eos_id_ = 1;
    int pad_id_ = 2;
    bool byte_fallback_ = true;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Learns merges by repeatedly fusing the most frequent adjacent unit pair.
// Ties break toward the lexicographically smallest (left, right) token-string
// pair, which makes training deterministic. With char_level the base alphabet
// is the corpus character set and unknown characters become encode errors;
// otherwise the base alphabet is all 256 bytes.
inline TokenizerModel train_bpe(const std::vector<std::string>& corpus, size_t target_vocab_size,
                                const std::vector<std::string>& special_tokens = {"<s>", "</s>", "<pad>"},
                                bool char_level = false) {
    if (special_tokens.size() != 3) throw ConfigError("train_bpe expects exactly bos, eos, pad special tokens");
    bool has_text = false;
    for (const std::string& text : corpus) {
        if (!text.empty()) has_text = true;
    }
    if (corpus.empty() || !has_text) throw DataError("train_bpe: empty corpus");

    TokenizerModel model;
    model.byte_fallback_ = !char_level;
    for (const std::string& sp : special_tokens) {
        if (sp.empty()) throw ConfigError("special tokens must be non-empty");
        if (model.token_ids_.count(sp)) throw ConfigError("duplicate special token: " + sp);
        model.token_ids_[sp] = static_cast<int>(model.tokens_.size());
        model.tokens_.push_back(sp);
    }
    model.bos_id_ = 0;
    model.eos_id_ = 1;
    model.pad_id_ = 2;

    // Pre-token multiset. Special-token strings are split out and dropped so
    // merges can never recreate or cross them.
    std::map<std::string, int64_t> word_counts;
    for (const std::string& text : corpus) {
        size_t pos = 0;
        size_t segment_start = 0;
        auto flush = [&](size_t end) {
            for (const std::string& piece : pre_tokenize(text.substr(segment_start, end - segment_start)))
                ++word_counts[piece];
        };
        while (pos < text.size()) {
            int special = model.match_special(text, pos);
            if (special >= 0) {
                flush(pos);
                pos += model.tokens_[static_cast<size_t>(special)].size();
                segment_start = pos;
            } else {
                ++pos;
            }
        }
        flush(text.size());
    }

    // Base alphabet.
    if (char_level) {
        std::map<std::string, int> charset;
        for (const auto& [word, count] : word_counts) {
            for (const std::string& ch : utf8_chars(word)) charset.emplace(ch, 0);
        }
        for (auto& [ch, id] : charset) {
            auto it = model.token_ids_.find(ch);
            if (it != model.token_ids_.end()) {
                id = it->second;
                continue;
            }
            id = static_cast<int>(model.tokens_.size());
            model.token_ids_[ch] = id;
            model.tokens_.push_back(ch);
        }
    } else {
        for (int b = 0; b < 256; ++b) {
            std::string s(1, static_cast<char>(b));
            if (model.token_ids_.count(s)) continue;
            model.token_ids_[s] = static_cast<int>(model.tokens_.size());
            model.tokens_.push_back(s);
        }
    }
    model.rebuild_byte_ids();
    if (target_vocab_size < model.tokens_.size())
        throw ConfigError("target vocab size " + std::to_string(target_vocab_size) +
                          " is smaller than base alphabet plus specials (" + std::to_string(model.tokens_.size()) +
                          ")");

    // Words as unit-id sequences with multiplicity.
    struct Word {
        std::vector<int> units;
        int64_t count;
    };
    std::vector<Word> words;
    words.reserve(word_counts.size());
    for (const auto& [word, count] : word_counts) {
        Word w;
        w.count = count;
        if (char_level) {
            for (const std::string& ch : utf8_chars(word)) w.units.push_back(model.token_ids_.at(ch));
        } else {
            for (unsigned char c : word) w.units.push_back(model.byte_ids_[c]);
        }
        words.push_back(std::move(w));
    }

    auto pair_key = &TokenizerModel::pair_key;
    std::unordered_map<uint64_t, int64_t> pair_counts;
    std::unordered_map<uint64_t, std::unordered_set<size_t>> pair_words;
    auto add_pairs = [&](size_t wi, int64_t sign) {
        const Word& w = words[wi];
        for (size_t i = 0; i + 1 < w.units.size(); ++i) {
            uint64_t key = pair_key(w.units[i], w.units[i + 1]);
            int64_t& c = pair_counts[key];
            c += sign * w.count;
            if (c <= 0) {
                pair_counts.erase(key);
            } else if (sign > 0) {
                pair_words[key].insert(wi);
            }
        }
    };
    for (size_t wi = 0; wi < words.size(); ++wi) add_pairs(wi, +1);

    auto unpack = [](uint64_t key) {
        return std::pair<int, int>(static_cast<int>(key >> 32), static_cast<int>(key & 0xFFFFFFFFULL));
    };

    while (model.tokens_.size() < target_vocab_size) {
        uint64_t best_key = 0;
        int64_t best_count = 0;
        for (const auto& [key, count] : pair_counts) {
            if (count > best_count) {
                best_key = key;
                best_count = count;
            } else if (count == best_count && count > 0) {
                auto [l1, r1] = unpack(key);
                auto [l2, r2] = unpack(best_key);
                const std::string& a1 = model.tokens_[static_cast<size_t>(l1)];
                const std::string& a2 = model.tokens_[static_cast<size_t>(l2)];
                if (a1 < a2 || (a1 == a2 && model.tokens_[static_cast<size_t>(r1)] <
                                                model.tokens_[static_cast<size_t>(r2)])) {
                    best_key = key;
                }
            }
        }
        if (best_count == 0) break;

        auto [left, right] = unpack(best_key);
        std::string product_str =
            model.tokens_[static_cast<size_t>(left)] + model.tokens_[static_cast<size_t>(right)];
        int product;
        auto existing = model.token_ids_.find(product_str);
        if (existing != model.token_ids_.end()) {
            product = existing->second;
        } else {
            product = static_cast<int>(model.tokens_.size());
            model.token_ids_[product_str] = product;
            model.tokens_.push_back(product_str);
        }
        if (!model.merge_rank_.count(best_key)) {
            model.merge_rank_[best_key] = static_cast<int>(model.merges_.size());
            model.merges_.push_back({left, right, product});
        }

        auto affected_it = pair_words.find(best_key);
        std::vector<size_t> affected(affected_it == pair_words.end()
                                         ? std::vector<size_t>()
                                         : std::vector<size_t>(affected_it->second.begin(),
                                                               affected_it->second.end()));
        std::sort(affected.begin(), affected.end());
        pair_words.erase(best_key);
        for (size_t wi : affected) {
            Word& w = words[wi];
            bool contains = false;
            for (size_t i = 0; i + 1 < w.units.size(); ++i) {
                if (w.units[i] == left && w.units[i + 1] == right) {
                    contains = true;
                    break;
                }
            }
            if (!contains) continue;
            add_pairs(wi, -1);
            std::vector<int> next;
            next.reserve(w.units.size());
            size_t i = 0;
            while (i < w.units.size()) {
                if (i + 1 < w.units.size() && w.units[i] == left && w.units[i + 1] == right) {
                    next.push_back(product);
                    i += 2;
                } else {
                    next.push_back(w.units[i]);
                    ++i;
                }
            }
            w.units = std::move(next);
            add_pairs(wi, +1);
        }
        pair_counts.erase(best_key);
    }
    return model;
}

}  // namespace sumtune
