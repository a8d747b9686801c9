#pragma once

// Dialogue corpus ingestion and instruction templating.
//
// Records arrive in a normalized JSONL schema, get wrapped with per-dataset
// instruction templates into prompt/target pairs, and are tokenized part-wise
// so over-long dialogues can be truncated from the middle while instruction
// and target stay intact.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sumtune/common.hpp"
#include "sumtune/tokenizer.hpp"

namespace sumtune {

enum class Role { agent, user, named };
enum class SummaryType { agent, user, all };
enum class DatasetTag { csds, samsum };

// Target terminator: `distinct` ends generation with the eos token; the
// literal mode reuses the bos string as terminator, matching prompts that
// wrap both ends with the same boundary token.
enum class BoundaryMode { distinct, paper_literal };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::agent: return "agent";
        case Role::user: return "user";
        default: return "named";
    }
}

inline const char* summary_type_name(SummaryType t) {
    switch (t) {
        case SummaryType::agent: return "agent";
        case SummaryType::user: return "user";
        default: return "all";
    }
}

inline const char* dataset_tag_name(DatasetTag t) { return t == DatasetTag::csds ? "csds" : "samsum"; }

inline SummaryType summary_type_from(const std::string& s) {
    if (s == "agent") return SummaryType::agent;
    if (s == "user") return SummaryType::user;
    if (s == "all") return SummaryType::all;
    throw ConfigError("unknown summary type: " + s);
}

inline DatasetTag dataset_tag_from(const std::string& s) {
    if (s == "csds") return DatasetTag::csds;
    if (s == "samsum") return DatasetTag::samsum;
    throw ConfigError("unknown dataset schema: " + s);
}

struct Turn {
    Role role = Role::user;
    std::string name;  // set only for named speakers
    std::string text;
};

struct DialogueRecord {
    std::string id;
    std::vector<Turn> turns;
    std::map<SummaryType, std::string> summaries;
};

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

inline const std::string& instruction_template(DatasetTag tag, SummaryType type) {
    static const std::string csds_agent = "下面是一段电商公司的客服和用户之间的对话，请你给出客服的摘要。";
    static const std::string csds_user = "下面是一段电商公司的客服和用户之间的对话，请你给出用户的摘要。";
    static const std::string csds_all = "下面是一段电商公司的客服和用户之间的对话，请你给出全部的摘要。";
    static const std::string samsum_all = "Please make the summarization of following dialogue.";
    if (tag == DatasetTag::samsum) {
        if (type != SummaryType::all) throw ConfigError("samsum has only the \"all\" summary type");
        return samsum_all;
    }
    switch (type) {
        case SummaryType::agent: return csds_agent;
        case SummaryType::user: return csds_user;
        default: return csds_all;
    }
}

inline std::string speaker_label(const Turn& turn) {
    switch (turn.role) {
        case Role::agent: return "客服";
        case Role::user: return "用户";
        default: return turn.name;
    }
}

inline std::string serialize_dialogue(const DialogueRecord& record) {
    std::string out;
    for (size_t i = 0; i < record.turns.size(); ++i) {
        if (i > 0) out += "\n";
        out += speaker_label(record.turns[i]) + ": " + record.turns[i].text;
    }
    return out;
}

inline std::string boundary_open() { return "<s>"; }
inline std::string boundary_close(BoundaryMode mode) { return mode == BoundaryMode::paper_literal ? "<s>" : "</s>"; }

struct InstructionSample {
    std::string prompt_text;  // boundary + instruction + "\n" + dialogue + "\n"
    std::string target_text;  // summary + boundary
    SummaryType summary_type = SummaryType::all;
    DatasetTag dataset_tag = DatasetTag::csds;
    std::string record_id;
    // Parts kept for tokenization and stats; their concatenation with the
    // template skeleton reproduces prompt_text/target_text exactly.
    std::string instruction;
    std::string dialogue;
    std::string summary;
};

inline InstructionSample make_sample(const DialogueRecord& record, DatasetTag tag, SummaryType type,
                                     BoundaryMode mode = BoundaryMode::distinct) {
    auto it = record.summaries.find(type);
    if (it == record.summaries.end())
        throw DataError("record " + record.id + ": missing required summary \"" + summary_type_name(type) + "\"");
    InstructionSample s;
    s.summary_type = type;
    s.dataset_tag = tag;
    s.record_id = record.id;
    s.instruction = instruction_template(tag, type);
    s.dialogue = serialize_dialogue(record);
    s.summary = it->second;
    s.prompt_text = boundary_open() + s.instruction + "\n" + s.dialogue + "\n";
    s.target_text = s.summary + boundary_close(mode);
    return s;
}

inline std::vector<InstructionSample> build_instruction_samples(const std::vector<DialogueRecord>& records,
                                                                DatasetTag tag,
                                                                BoundaryMode mode = BoundaryMode::distinct) {
    std::vector<InstructionSample> out;
    out.reserve(records.size() * (tag == DatasetTag::csds ? 3 : 1));
    for (const DialogueRecord& record : records) {
        if (tag == DatasetTag::csds) {
            for (SummaryType type : {SummaryType::agent, SummaryType::user, SummaryType::all})
                out.push_back(make_sample(record, tag, type, mode));
        } else {
            out.push_back(make_sample(record, tag, SummaryType::all, mode));
        }
    }
    return out;
}

struct StrippedSample {
    std::string dialogue;
    std::string summary;
};

// Inverse of make_sample: peels the template skeleton off a sample and
// returns the embedded dialogue serialization and summary.
inline StrippedSample strip_template(const InstructionSample& s, BoundaryMode mode = BoundaryMode::distinct) {
    std::string head = boundary_open() + instruction_template(s.dataset_tag, s.summary_type) + "\n";
    if (s.prompt_text.rfind(head, 0) != 0 || s.prompt_text.empty() || s.prompt_text.back() != '\n')
        throw DataError("record " + s.record_id + ": prompt does not match its template");
    std::string tail = boundary_close(mode);
    if (s.target_text.size() < tail.size() ||
        s.target_text.compare(s.target_text.size() - tail.size(), tail.size(), tail) != 0)
        throw DataError("record " + s.record_id + ": target does not end with the boundary token");
    StrippedSample out;
    out.dialogue = s.prompt_text.substr(head.size(), s.prompt_text.size() - head.size() - 1);
    out.summary = s.target_text.substr(0, s.target_text.size() - tail.size());
    return out;
}

// ---------------------------------------------------------------------------
// Normalized JSONL ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim_copy(const std::string& s) {
    size_t b = 0;
    size_t e = s.size();
    while (b < e && is_ascii_space(s[b])) ++b;
    while (e > b && is_ascii_space(s[e - 1])) --e;
    return s.substr(b, e - b);
}

inline void reject_unknown_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                                const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw DataError(where + ": unknown key \"" + it.key() + "\"");
    }
}

}  // namespace detail

inline DialogueRecord record_from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object()) throw DataError(where + ": record must be a JSON object");
    detail::reject_unknown_keys(j, {"id", "turns", "summaries"}, where);
    if (!j.contains("id") || !j.at("id").is_string()) throw DataError(where + ": missing string field \"id\"");
    DialogueRecord record;
    record.id = j.at("id").get<std::string>();
    if (record.id.empty()) throw DataError(where + ": empty record id");
    const std::string rid = "record " + record.id;

    if (!j.contains("turns") || !j.at("turns").is_array() || j.at("turns").empty())
        throw DataError(rid + ": \"turns\" must be a non-empty array");
    for (const auto& tj : j.at("turns")) {
        if (!tj.is_object()) throw DataError(rid + ": turn must be an object");
        detail::reject_unknown_keys(tj, {"role", "name", "text"}, rid);
        if (!tj.contains("role") || !tj.at("role").is_string()) throw DataError(rid + ": turn missing \"role\"");
        if (!tj.contains("text") || !tj.at("text").is_string()) throw DataError(rid + ": turn missing \"text\"");
        Turn turn;
        std::string role = tj.at("role").get<std::string>();
        if (role == "agent") {
            turn.role = Role::agent;
        } else if (role == "user") {
            turn.role = Role::user;
        } else if (role == "named") {
            turn.role = Role::named;
            if (!tj.contains("name") || !tj.at("name").is_string() || tj.at("name").get<std::string>().empty())
                throw DataError(rid + ": named turn requires a non-empty \"name\"");
            turn.name = tj.at("name").get<std::string>();
        } else {
            throw DataError(rid + ": unknown role \"" + role + "\"");
        }
        turn.text = tj.at("text").get<std::string>();
        if (detail::trim_copy(turn.text).empty()) throw DataError(rid + ": empty utterance");
        record.turns.push_back(std::move(turn));
    }

    if (!j.contains("summaries") || !j.at("summaries").is_object())
        throw DataError(rid + ": missing \"summaries\" object");
    detail::reject_unknown_keys(j.at("summaries"), {"agent", "user", "all"}, rid);
    for (auto it = j.at("summaries").begin(); it != j.at("summaries").end(); ++it) {
        if (!it.value().is_string() || detail::trim_copy(it.value().get<std::string>()).empty())
            throw DataError(rid + ": summary \"" + it.key() + "\" must be a non-empty string");
        record.summaries[summary_type_from(it.key())] = it.value().get<std::string>();
    }
    return record;
}

inline nlohmann::json record_to_json(const DialogueRecord& record) {
    nlohmann::json turns = nlohmann::json::array();
    for (const Turn& turn : record.turns) {
        nlohmann::json tj{{"role", role_name(turn.role)}, {"text", turn.text}};
        tj["name"] = turn.role == Role::named ? nlohmann::json(turn.name) : nlohmann::json(nullptr);
        turns.push_back(std::move(tj));
    }
    nlohmann::json summaries = nlohmann::json::object();
    for (const auto& [type, text] : record.summaries) summaries[summary_type_name(type)] = text;
    return nlohmann::json{{"id", record.id}, {"turns", turns}, {"summaries", summaries}};
}

inline void validate_schema(const DialogueRecord& record, DatasetTag tag) {
    const std::string rid = "record " + record.id;
    if (tag == DatasetTag::csds) {
        for (SummaryType type : {SummaryType::agent, SummaryType::user, SummaryType::all}) {
            if (!record.summaries.count(type))
                throw DataError(rid + ": csds record missing summary \"" + std::string(summary_type_name(type)) +
                                "\"");
        }
    } else {
        if (!record.summaries.count(SummaryType::all)) throw DataError(rid + ": samsum record missing summary \"all\"");
        if (record.summaries.size() != 1)
            throw DataError(rid + ": samsum record must carry exactly the \"all\" summary");
    }
}

inline std::vector<DialogueRecord> load_records(const std::filesystem::path& path, DatasetTag tag) {
    std::string content = read_file(path);
    std::vector<DialogueRecord> records;
    size_t line_no = 0;
    size_t pos = 0;
    while (pos <= content.size()) {
        size_t nl = content.find('\n', pos);
        std::string line = content.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? content.size() + 1 : nl + 1;
        ++line_no;
        if (detail::trim_copy(line).empty()) continue;
        std::string where = path.filename().string() + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + ": invalid JSON: " + e.what());
        }
        DialogueRecord record = record_from_json(j, where);
        validate_schema(record, tag);
        records.push_back(std::move(record));
    }
    return records;
}

inline void save_records(const std::filesystem::path& path, const std::vector<DialogueRecord>& records) {
    std::string out;
    for (const DialogueRecord& record : records) out += record_to_json(record).dump() + "\n";
    write_file(path, out);
}

// ---------------------------------------------------------------------------
// Tokenization and batching
// ---------------------------------------------------------------------------

struct TokenizeOptions {
    size_t max_len = 512;
    bool prompt_loss = false;  // when set, loss covers every predictable position
};

struct TokenizedSample {
    std::vector<int> ids;
    size_t target_start = 0;  // first loss-bearing position
    SummaryType summary_type = SummaryType::all;
    DatasetTag dataset_tag = DatasetTag::csds;
    std::string record_id;
    bool truncated = false;

    size_t length() const { return ids.size(); }
    size_t target_len() const { return ids.size() - target_start; }
};

struct TokenizeReport {
    size_t kept = 0;
    size_t truncated = 0;
    size_t skipped = 0;  // instruction + target alone exceed max_len
    std::vector<std::string> skipped_ids;
};

// Part-wise tokenization: prompt head (boundary + instruction + newline),
// dialogue body, separating newline, then target. Over-long dialogues lose
// tokens from their middle; samples whose head + separator + target already
// exceed max_len are skipped and reported.
inline std::optional<TokenizedSample> tokenize_sample(const InstructionSample& sample, const TokenizerModel& tok,
                                                      const TokenizeOptions& opt) {
    if (opt.max_len < 8) throw ConfigError("max_len must be at least 8");
    std::vector<int> head = tok.encode(boundary_open() + sample.instruction + "\n");
    std::vector<int> body = tok.encode(sample.dialogue);
    std::vector<int> sep = tok.encode("\n");
    std::vector<int> target = tok.encode(sample.target_text);

    size_t overhead = head.size() + sep.size() + target.size();
    if (overhead > opt.max_len) return std::nullopt;

    TokenizedSample out;
    out.summary_type = sample.summary_type;
    out.dataset_tag = sample.dataset_tag;
    out.record_id = sample.record_id;

    size_t budget = opt.max_len - overhead;
    if (body.size() > budget) {
        out.truncated = true;
        size_t keep_head = (budget + 1) / 2;
        size_t keep_tail = budget - keep_head;
        std::vector<int> cut;
        cut.reserve(budget);
        cut.insert(cut.end(), body.begin(), body.begin() + static_cast<std::ptrdiff_t>(keep_head));
        cut.insert(cut.end(), body.end() - static_cast<std::ptrdiff_t>(keep_tail), body.end());
        body = std::move(cut);
    }

    out.ids.reserve(head.size() + body.size() + sep.size() + target.size());
    out.ids.insert(out.ids.end(), head.begin(), head.end());
    out.ids.insert(out.ids.end(), body.begin(), body.end());
    out.ids.insert(out.ids.end(), sep.begin(), sep.end());
    out.target_start = opt.prompt_loss ? 1 : out.ids.size();
    out.ids.insert(out.ids.end(), target.begin(), target.end());
    return out;
}

inline std::vector<TokenizedSample> tokenize_samples(const std::vector<InstructionSample>& samples,
                                                     const TokenizerModel& tok, const TokenizeOptions& opt,
                                                     TokenizeReport* report = nullptr) {
    std::vector<TokenizedSample> out;
    out.reserve(samples.size());
    for (const InstructionSample& sample : samples) {
        std::optional<TokenizedSample> t = tokenize_sample(sample, tok, opt);
        if (!t) {
            if (report) {
                ++report->skipped;
                report->skipped_ids.push_back(sample.record_id);
            }
            continue;
        }
        if (report) {
            ++report->kept;
            if (t->truncated) ++report->truncated;
        }
        out.push_back(std::move(*t));
    }
    return out;
}

struct TokenBatch {
    MatI token_ids;       // B x L_max, padded with pad id
    MatU8 attention_mask; // B x L_max
    MatU8 loss_mask;      // B x L_max, true exactly on loss-bearing positions
    std::vector<int> lengths;

    int batch_size() const { return static_cast<int>(token_ids.rows()); }
    int max_len() const { return static_cast<int>(token_ids.cols()); }
};

inline TokenBatch pack_batch(const std::vector<TokenizedSample>& group, int pad_id) {
    if (group.empty()) throw ConfigError("pack_batch: empty group");
    size_t max_len = 0;
    for (const TokenizedSample& s : group) max_len = std::max(max_len, s.ids.size());
    TokenBatch batch;
    const auto rows = static_cast<Eigen::Index>(group.size());
    const auto cols = static_cast<Eigen::Index>(max_len);
    batch.token_ids = MatI::Constant(rows, cols, pad_id);
    batch.attention_mask = MatU8::Zero(rows, cols);
    batch.loss_mask = MatU8::Zero(rows, cols);
    batch.lengths.resize(group.size());
    for (size_t r = 0; r < group.size(); ++r) {
        const TokenizedSample& s = group[r];
        batch.lengths[r] = static_cast<int>(s.ids.size());
        for (size_t c = 0; c < s.ids.size(); ++c) {
            batch.token_ids(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = s.ids[c];
            batch.attention_mask(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = 1;
            if (c >= s.target_start) batch.loss_mask(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = 1;
        }
    }
    return batch;
}

// One epoch of batches under a deterministic shuffle.
inline std::vector<TokenBatch> make_batches(const std::vector<TokenizedSample>& samples, size_t batch_size,
                                            int pad_id, uint64_t seed) {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<TokenBatch> batches;
    for (size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<TokenizedSample> group;
        for (size_t i = start; i < std::min(order.size(), start + batch_size); ++i)
            group.push_back(samples[order[i]]);
        batches.push_back(pack_batch(group, pad_id));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// Dataset statistics
// ---------------------------------------------------------------------------

struct Histogram {
    size_t bucket_width = 0;
    std::vector<size_t> buckets;
    size_t count = 0;
    double mean = 0.0;
    size_t max_value = 0;
    size_t threshold = 0;
    size_t under_threshold = 0;

    double fraction_under_threshold() const {
        return count == 0 ? 0.0 : static_cast<double>(under_threshold) / static_cast<double>(count);
    }
};

inline Histogram build_histogram(const std::vector<size_t>& values, size_t bucket_width, size_t threshold) {
    if (bucket_width == 0) throw ConfigError("histogram bucket width must be positive");
    Histogram h;
    h.bucket_width = bucket_width;
    h.threshold = threshold;
    h.count = values.size();
    double sum = 0.0;
    for (size_t v : values) {
        sum += static_cast<double>(v);
        h.max_value = std::max(h.max_value, v);
        if (v < threshold) ++h.under_threshold;
        size_t bucket = v / bucket_width;
        if (bucket >= h.buckets.size()) h.buckets.resize(bucket + 1, 0);
        ++h.buckets[bucket];
    }
    h.mean = values.empty() ? 0.0 : sum / static_cast<double>(values.size());
    return h;
}

struct StatsReport {
    size_t sample_count = 0;
    std::map<std::string, size_t> by_type;
    Histogram dialogue;
    Histogram summary;

    nlohmann::json to_json() const {
        auto hist = [](const Histogram& h) {
            return nlohmann::json{{"bucket_width", h.bucket_width}, {"buckets", h.buckets},
                                  {"count", h.count},              {"mean", h.mean},
                                  {"max", h.max_value},            {"threshold", h.threshold},
                                  {"fraction_under_threshold", h.fraction_under_threshold()}};
        };
        return nlohmann::json{{"samples", sample_count},
                              {"by_summary_type", by_type},
                              {"dialogue_tokens", hist(dialogue)},
                              {"summary_tokens", hist(summary)}};
    }
};

inline StatsReport dataset_stats(const std::vector<InstructionSample>& samples, const TokenizerModel& tok,
                                 size_t bucket_width = 128, size_t threshold = 1200) {
    StatsReport report;
    report.sample_count = samples.size();
    std::vector<size_t> dialogue_lens;
    std::vector<size_t> summary_lens;
    dialogue_lens.reserve(samples.size());
    summary_lens.reserve(samples.size());
    for (const InstructionSample& s : samples) {
        ++report.by_type[summary_type_name(s.summary_type)];
        dialogue_lens.push_back(tok.encode(s.dialogue).size());
        summary_lens.push_back(tok.encode(s.summary).size());
    }
    report.dialogue = build_histogram(dialogue_lens, bucket_width, threshold);
    report.summary = build_histogram(summary_lens, bucket_width, threshold);
    return report;
}

}  // namespace sumtune
