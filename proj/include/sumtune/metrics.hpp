#pragma once
// Summary-quality metrics: ROUGE-1/2/L, corpus BLEU-4 with brevity penalty,
// and a greedy-matching cosine-similarity score over pluggable embeddings.
//
// Scoring conventions:
//   - per-pair scores are internal [0,1]; reports convert to percent,
//   - F1 is 0 whenever P + R is 0,
//   - BLEU smoothing: the k-th zero clipped count is replaced by 1/2^k,
//     and orders with no possible n-grams count as vacuously perfect,
//   - metric tokenization is character-level for CJK text and
//     whitespace-split lowercase for everything else.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"

namespace sumtune {

struct Scores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline double harmonic_f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline bool is_cjk_codepoint(uint32_t cp) {
    if (cp == 0x3000) return false;  // ideographic space separates, like ASCII space
    return (cp >= 0x2E80 && cp <= 0xA4CF) || (cp >= 0xF900 && cp <= 0xFAFF) || (cp >= 0xFE30 && cp <= 0xFE4F) ||
           (cp >= 0xFF00 && cp <= 0xFFEF);
}

inline std::vector<std::string> metric_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (uint32_t cp : utf8_codepoints(text)) {
        if (cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == 0x3000) {
            flush();
        } else if (is_cjk_codepoint(cp)) {
            flush();
            std::string c;
            append_utf8(c, cp);
            out.push_back(std::move(c));
        } else {
            if (cp >= 'A' && cp <= 'Z') cp += 'a' - 'A';
            append_utf8(word, cp);
        }
    }
    flush();
    return out;
}

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, int>;

inline NgramCounts ngram_counts(const std::vector<std::string>& tokens, int n) {
    NgramCounts counts;
    if (n < 1 || tokens.size() < static_cast<size_t>(n)) return counts;
    for (size_t i = 0; i + static_cast<size_t>(n) <= tokens.size(); ++i)
        counts[std::vector<std::string>(tokens.begin() + static_cast<long>(i),
                                        tokens.begin() + static_cast<long>(i) + n)]++;
    return counts;
}

inline long clipped_overlap(const NgramCounts& cand, const NgramCounts& ref) {
    long overlap = 0;
    for (const auto& [gram, count] : cand) {
        auto it = ref.find(gram);
        if (it != ref.end()) overlap += std::min(count, it->second);
    }
    return overlap;
}

inline size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (size_t i = 1; i <= a.size(); ++i) {
        for (size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace detail

inline Scores rouge_n(const std::vector<std::string>& cand, const std::vector<std::string>& ref, int n) {
    if (n < 1) throw ConfigError("rouge_n: n must be at least 1");
    detail::NgramCounts cc = detail::ngram_counts(cand, n);
    detail::NgramCounts rc = detail::ngram_counts(ref, n);
    long cand_total = 0, ref_total = 0;
    for (const auto& [gram, count] : cc) cand_total += count;
    for (const auto& [gram, count] : rc) ref_total += count;
    if (cand_total == 0 || ref_total == 0) return {};
    double overlap = static_cast<double>(detail::clipped_overlap(cc, rc));
    Scores s;
    s.precision = overlap / static_cast<double>(cand_total);
    s.recall = overlap / static_cast<double>(ref_total);
    s.f1 = harmonic_f1(s.precision, s.recall);
    return s;
}

inline Scores rouge_l(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    if (cand.empty() || ref.empty()) return {};
    double lcs = static_cast<double>(detail::lcs_length(cand, ref));
    Scores s;
    s.precision = lcs / static_cast<double>(cand.size());
    s.recall = lcs / static_cast<double>(ref.size());
    s.f1 = harmonic_f1(s.precision, s.recall);
    return s;
}

inline double bleu_brevity_penalty(long cand_len, long ref_len) {
    if (cand_len <= 0) return 0.0;
    if (cand_len >= ref_len) return 1.0;
    return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
}

// Corpus BLEU over pre-tokenized pairs, scaled to [0,100].
inline double bleu_corpus(const std::vector<std::vector<std::string>>& cands,
                          const std::vector<std::vector<std::string>>& refs) {
    if (cands.size() != refs.size()) throw ConfigError("bleu: candidate/reference count mismatch");
    if (cands.empty()) throw DataError("bleu: empty corpus");
    long cand_len = 0, ref_len = 0;
    double num[4] = {0, 0, 0, 0};
    double den[4] = {0, 0, 0, 0};
    for (size_t i = 0; i < cands.size(); ++i) {
        cand_len += static_cast<long>(cands[i].size());
        ref_len += static_cast<long>(refs[i].size());
        for (int n = 1; n <= 4; ++n) {
            detail::NgramCounts cc = detail::ngram_counts(cands[i], n);
            detail::NgramCounts rc = detail::ngram_counts(refs[i], n);
            num[n - 1] += static_cast<double>(detail::clipped_overlap(cc, rc));
            long possible = static_cast<long>(cands[i].size()) - n + 1;
            den[n - 1] += static_cast<double>(std::max<long>(possible, 0));
        }
    }
    if (cand_len == 0) return 0.0;
    double log_sum = 0.0;
    int zeros = 0;
    for (int n = 0; n < 4; ++n) {
        if (den[n] == 0.0) continue;  // no n-grams possible: vacuously perfect
        double count = num[n];
        if (count == 0.0) {
            ++zeros;
            count = 1.0 / std::pow(2.0, zeros);
        }
        log_sum += 0.25 * std::log(count / den[n]);
    }
    return 100.0 * bleu_brevity_penalty(cand_len, ref_len) * std::exp(log_sum);
}

// Greedy cosine matching: each token on one side is matched to its most
// similar token on the other, and the means become recall and precision.
// Negative similarities floor at zero so scores stay in [0,1].
template <typename Token>
Scores embed_score(const std::vector<Token>& cand, const std::vector<Token>& ref,
                   const std::function<Vec(const Token&)>& embed) {
    if (cand.empty() || ref.empty()) return {};
    auto cosine = [](const Vec& u, const Vec& v) {
        double nu = u.norm(), nv = v.norm();
        if (nu == 0.0 || nv == 0.0) return 0.0;
        return u.dot(v) / (nu * nv);
    };
    std::vector<Vec> ce, re;
    ce.reserve(cand.size());
    re.reserve(ref.size());
    for (const Token& t : cand) ce.push_back(embed(t));
    for (const Token& t : ref) re.push_back(embed(t));
    auto side = [&](const std::vector<Vec>& from, const std::vector<Vec>& to) {
        double total = 0.0;
        for (const Vec& u : from) {
            double best = -1.0;
            for (const Vec& v : to) best = std::max(best, cosine(u, v));
            total += std::max(best, 0.0);
        }
        return total / static_cast<double>(from.size());
    };
    Scores s;
    s.precision = side(ce, re);
    s.recall = side(re, ce);
    s.f1 = harmonic_f1(s.precision, s.recall);
    return s;
}

// ---------------------------------------------------------------------------
// Corpus evaluation and report assembly.

struct EvalPair {
    std::string candidate;
    std::string reference;
    std::string summary_type = "all";  // "all", "user", or "agent"
};

struct TypeReport {
    Scores rouge1, rouge2, rougeL, embed;  // percent
    double bleu = 0.0;                     // percent
    int count = 0;
};

struct MetricReport {
    std::map<std::string, TypeReport> by_type;
    int skipped = 0;
};

using TextEmbedFn = std::function<Vec(const std::string&)>;

// Macro-averaged ROUGE and embedding scores plus corpus BLEU, grouped by
// summary type. Pairs with an empty reference are skipped and counted.
inline MetricReport evaluate_pairs(const std::vector<EvalPair>& pairs, const TextEmbedFn& embed = nullptr) {
    if (pairs.empty()) throw DataError("evaluate: empty test set");
    struct Bucket {
        std::vector<std::vector<std::string>> cands, refs;
    };
    std::map<std::string, Bucket> buckets;
    MetricReport report;
    for (const EvalPair& pair : pairs) {
        if (pair.reference.empty()) {
            ++report.skipped;
            continue;
        }
        Bucket& bucket = buckets[pair.summary_type];
        bucket.cands.push_back(metric_tokens(pair.candidate));
        bucket.refs.push_back(metric_tokens(pair.reference));
    }
    if (buckets.empty()) throw DataError("evaluate: every sample was missing its reference");
    auto add = [](Scores& into, const Scores& s) {
        into.precision += s.precision;
        into.recall += s.recall;
        into.f1 += s.f1;
    };
    auto finish = [](Scores& s, double inv_percent) {
        s.precision *= inv_percent;
        s.recall *= inv_percent;
        s.f1 *= inv_percent;
    };
    for (auto& [type, bucket] : buckets) {
        TypeReport tr;
        tr.count = static_cast<int>(bucket.cands.size());
        for (size_t i = 0; i < bucket.cands.size(); ++i) {
            add(tr.rouge1, rouge_n(bucket.cands[i], bucket.refs[i], 1));
            add(tr.rouge2, rouge_n(bucket.cands[i], bucket.refs[i], 2));
            add(tr.rougeL, rouge_l(bucket.cands[i], bucket.refs[i]));
            if (embed) add(tr.embed, embed_score<std::string>(bucket.cands[i], bucket.refs[i], embed));
        }
        double inv_percent = 100.0 / static_cast<double>(tr.count);
        finish(tr.rouge1, inv_percent);
        finish(tr.rouge2, inv_percent);
        finish(tr.rougeL, inv_percent);
        finish(tr.embed, inv_percent);
        tr.bleu = bleu_corpus(bucket.cands, bucket.refs);
        report.by_type[type] = tr;
    }
    return report;
}

// Mean of several reports (e.g. the last k checkpoints). All reports must
// cover the same summary types.
inline MetricReport average_reports(const std::vector<MetricReport>& reports) {
    if (reports.empty()) throw DataError("average_reports: nothing to average");
    MetricReport out = reports.front();
    for (size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].by_type.size() != out.by_type.size())
            throw ConfigError("average_reports: summary types differ between reports");
        for (auto& [type, tr] : out.by_type) {
            auto it = reports[i].by_type.find(type);
            if (it == reports[i].by_type.end())
                throw ConfigError("average_reports: summary types differ between reports");
            auto add = [](Scores& into, const Scores& s) {
                into.precision += s.precision;
                into.recall += s.recall;
                into.f1 += s.f1;
            };
            add(tr.rouge1, it->second.rouge1);
            add(tr.rouge2, it->second.rouge2);
            add(tr.rougeL, it->second.rougeL);
            add(tr.embed, it->second.embed);
            tr.bleu += it->second.bleu;
            tr.count += it->second.count;
        }
        out.skipped += reports[i].skipped;
    }
    double inv = 1.0 / static_cast<double>(reports.size());
    for (auto& [type, tr] : out.by_type) {
        auto scale = [&](Scores& s) {
            s.precision *= inv;
            s.recall *= inv;
            s.f1 *= inv;
        };
        scale(tr.rouge1);
        scale(tr.rouge2);
        scale(tr.rougeL);
        scale(tr.embed);
        tr.bleu *= inv;
    }
    return out;
}

inline nlohmann::json scores_json(const Scores& s) {
    return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

inline nlohmann::json report_json(const MetricReport& report) {
    nlohmann::json types = nlohmann::json::object();
    for (const auto& [type, tr] : report.by_type) {
        types[type] = {{"rouge1", scores_json(tr.rouge1)}, {"rouge2", scores_json(tr.rouge2)},
                       {"rougeL", scores_json(tr.rougeL)}, {"embed_score", scores_json(tr.embed)},
                       {"bleu", tr.bleu},                  {"count", tr.count}};
    }
    return {{"types", types}, {"skipped", report.skipped}};
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport report;
    try {
        report.skipped = j.at("skipped").get<int>();
        auto scores = [](const nlohmann::json& s) {
            return Scores{s.at("precision").get<double>(), s.at("recall").get<double>(),
                          s.at("f1").get<double>()};
        };
        for (auto it = j.at("types").begin(); it != j.at("types").end(); ++it) {
            TypeReport tr;
            tr.rouge1 = scores(it.value().at("rouge1"));
            tr.rouge2 = scores(it.value().at("rouge2"));
            tr.rougeL = scores(it.value().at("rougeL"));
            tr.embed = scores(it.value().at("embed_score"));
            tr.bleu = it.value().at("bleu").get<double>();
            tr.count = it.value().at("count").get<int>();
            report.by_type[it.key()] = tr;
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed metric report: " + std::string(e.what()));
    }
    return report;
}

// Per-type, per-metric F1/BLEU deltas (other minus base). Requires both runs
// to cover the same summary types.
inline nlohmann::json compare_reports(const MetricReport& base, const MetricReport& other) {
    if (base.by_type.size() != other.by_type.size())
        throw DataError("compare: runs cover different summary types");
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [type, tb] : base.by_type) {
        auto it = other.by_type.find(type);
        if (it == other.by_type.end()) throw DataError("compare: runs cover different summary types");
        const TypeReport& to = it->second;
        out[type] = {{"rouge1_f1", to.rouge1.f1 - tb.rouge1.f1},
                     {"rouge2_f1", to.rouge2.f1 - tb.rouge2.f1},
                     {"rougeL_f1", to.rougeL.f1 - tb.rougeL.f1},
                     {"bleu", to.bleu - tb.bleu},
                     {"embed_f1", to.embed.f1 - tb.embed.f1}};
    }
    return out;
}

// Published reference points shown alongside desk-scale results for context.
// These are display-only and never asserted by any test.
inline std::string published_reference_line(const std::string& dataset_tag) {
    if (dataset_tag == "csds") return "published reference (CSDS, ROUGE-1 F1): 60.72/63.01/56.21 final/user/agent";
    if (dataset_tag == "samsum") return "published reference (SAMSUM, ROUGE-1 F1): 74.51";
    return {};
}

// Plain-text table, one row per summary type in final/user/agent order.
inline std::string report_table(const MetricReport& report, const std::string& dataset_tag = {}) {
    auto row_name = [](const std::string& type) { return type == "all" ? std::string("final") : type; };
    std::vector<std::string> order;
    for (const std::string& type : {"all", "user", "agent"})
        if (report.by_type.count(type)) order.push_back(type);
    for (const auto& [type, tr] : report.by_type)
        if (std::find(order.begin(), order.end(), type) == order.end()) order.push_back(type);

    char line[160];
    std::string out = "type     R1      R2      RL      BLEU    EmbedScore  n\n";
    for (const std::string& type : order) {
        const TypeReport& tr = report.by_type.at(type);
        std::snprintf(line, sizeof(line), "%-8s %-7.2f %-7.2f %-7.2f %-7.2f %-11.2f %d\n", row_name(type).c_str(),
                      tr.rouge1.f1, tr.rouge2.f1, tr.rougeL.f1, tr.bleu, tr.embed.f1, tr.count);
        out += line;
    }
    if (report.skipped > 0) {
        std::snprintf(line, sizeof(line), "skipped (missing reference): %d\n", report.skipped);
        out += line;
    }
    std::string ref = published_reference_line(dataset_tag);
    if (!ref.empty()) out += ref + "\n";
    return out;
}

}  // namespace sumtune
