// sumtune: the command suite over the library. Subcommands cover tokenizer
// building, dataset conversion and stats, training runs, generation,
// evaluation, and run comparison. One JSON config file feeds every command;
// --set key=value flags override individual leaves (flag > file > default).
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "sumtune/checkpoint.hpp"
#include "sumtune/config.hpp"
#include "sumtune/corpus.hpp"
#include "sumtune/decode.hpp"
#include "sumtune/lora.hpp"
#include "sumtune/metrics.hpp"
#include "sumtune/model.hpp"
#include "sumtune/neftune.hpp"
#include "sumtune/tokenizer.hpp"
#include "sumtune/trainer.hpp"

namespace {

using namespace sumtune;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

nlohmann::json load_config_file(const std::string& path) {
    if (path.empty()) return nlohmann::json();
    std::string text;
    try {
        text = read_file(path);
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    nlohmann::json doc = nlohmann::json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
    return doc;
}

std::vector<std::pair<std::string, std::string>> parse_set_flags(const std::vector<std::string>& sets) {
    std::vector<std::pair<std::string, std::string>> out;
    out.reserve(sets.size());
    for (const std::string& s : sets) {
        size_t eq = s.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("--set expects key.path=value, got \"" + s + "\"");
        out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    return out;
}

RunConfig make_run_config(const std::string& config_path, const std::vector<std::string>& sets,
                          std::vector<std::pair<std::string, std::string>> extra = {}) {
    std::vector<std::pair<std::string, std::string>> overrides = parse_set_flags(sets);
    for (auto& pair : extra) overrides.push_back(std::move(pair));
    return load_run_config(load_config_file(config_path), overrides);
}

nlohmann::json parse_json_file(const std::string& path, const char* what) {
    nlohmann::json doc = nlohmann::json::parse(read_file(path), nullptr, false);
    if (doc.is_discarded()) throw DataError(std::string(what) + " is not valid JSON: " + path);
    return doc;
}

// ---------------------------------------------------------------------------
// Native dataset conversion (prepare-data)
// ---------------------------------------------------------------------------

// Accepts either one JSON array or JSONL; returns the items in order.
std::vector<nlohmann::json> parse_items(const std::string& path) {
    std::string text = read_file(path);
    nlohmann::json whole = nlohmann::json::parse(text, nullptr, false);
    if (!whole.is_discarded() && whole.is_array())
        return std::vector<nlohmann::json>(whole.begin(), whole.end());
    std::vector<nlohmann::json> items;
    size_t line_no = 0;
    size_t start = 0;
    while (start <= text.size()) {
        size_t end = text.find('\n', start);
        std::string line = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
        start = end == std::string::npos ? text.size() + 1 : end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json item = nlohmann::json::parse(line, nullptr, false);
        if (item.is_discarded() || !item.is_object())
            throw DataError(path + " line " + std::to_string(line_no) + ": not a JSON object");
        items.push_back(std::move(item));
    }
    if (items.empty()) throw DataError(path + ": no records found");
    return items;
}

const nlohmann::json* pick_key(const nlohmann::json& item, std::initializer_list<const char*> keys) {
    for (const char* key : keys)
        if (item.contains(key)) return &item.at(key);
    return nullptr;
}

std::string item_id(const nlohmann::json& item, const char* prefix, size_t index) {
    const nlohmann::json* id = pick_key(item, {"DialogueID", "id"});
    if (id) {
        if (id->is_string()) return id->get<std::string>();
        if (id->is_number_integer()) return std::to_string(id->get<long long>());
    }
    return std::string(prefix) + "-" + std::to_string(index);
}

// CSDS summaries arrive as sentence arrays; flatten to one string.
std::string flatten_text(const nlohmann::json& value) {
    if (value.is_string()) return value.get<std::string>();
    if (value.is_array()) {
        std::string out;
        for (const nlohmann::json& part : value)
            if (part.is_string()) out += part.get<std::string>();
        return out;
    }
    return {};
}

DialogueRecord csds_item_to_record(const nlohmann::json& item, size_t index) {
    DialogueRecord rec;
    rec.id = item_id(item, "csds", index);
    const nlohmann::json* dialogue = pick_key(item, {"Dialogue", "dialogue"});
    if (!dialogue || !dialogue->is_array())
        throw DataError("record " + rec.id + ": no dialogue turn array");
    for (const nlohmann::json& raw : *dialogue) {
        Turn turn;
        std::string speaker = raw.value("speaker", std::string());
        const nlohmann::json* text = pick_key(raw, {"utterance", "text"});
        if (text && text->is_string()) turn.text = text->get<std::string>();
        if (speaker == "Q" || speaker == "q" || speaker == "用户") {
            turn.role = Role::user;
        } else if (speaker == "A" || speaker == "a" || speaker == "客服") {
            turn.role = Role::agent;
        } else {
            turn.role = Role::named;
            turn.name = speaker;
        }
        rec.turns.push_back(std::move(turn));
    }
    struct Mapping {
        SummaryType type;
        std::initializer_list<const char*> keys;
    };
    for (const Mapping& m : {Mapping{SummaryType::all, {"FinalSumm", "final", "all"}},
                             Mapping{SummaryType::user, {"UserSumm", "user"}},
                             Mapping{SummaryType::agent, {"AgentSumm", "agent"}}}) {
        const nlohmann::json* value = pick_key(item, m.keys);
        if (value) rec.summaries[m.type] = flatten_text(*value);
    }
    return rec;
}

DialogueRecord samsum_item_to_record(const nlohmann::json& item, size_t index) {
    DialogueRecord rec;
    rec.id = item_id(item, "samsum", index);
    const nlohmann::json* dialogue = pick_key(item, {"dialogue", "Dialogue"});
    if (!dialogue || !dialogue->is_string())
        throw DataError("record " + rec.id + ": no dialogue text");
    std::string text = dialogue->get<std::string>();
    std::string line;
    auto finish_line = [&rec, &line](const std::string& rec_id) {
        if (line.empty()) return;
        size_t colon = line.find(": ");
        if (colon == std::string::npos || colon == 0) {
            // Continuation of a multi-line message.
            if (rec.turns.empty())
                throw DataError("record " + rec_id + ": first dialogue line has no speaker");
            rec.turns.back().text += "\n" + line;
        } else {
            Turn turn;
            turn.role = Role::named;
            turn.name = line.substr(0, colon);
            turn.text = line.substr(colon + 2);
            rec.turns.push_back(std::move(turn));
        }
        line.clear();
    };
    for (char c : text) {
        if (c == '\r') continue;
        if (c == '\n') {
            finish_line(rec.id);
        } else {
            line += c;
        }
    }
    finish_line(rec.id);
    const nlohmann::json* summary = pick_key(item, {"summary", "Summary"});
    if (summary && summary->is_string()) rec.summaries[SummaryType::all] = summary->get<std::string>();
    return rec;
}

int cmd_prepare_data(const std::string& schema, const std::string& in, const std::string& out) {
    DatasetTag tag = dataset_tag_from(schema);
    std::vector<nlohmann::json> items = parse_items(in);
    std::vector<DialogueRecord> records;
    records.reserve(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
        const nlohmann::json& item = items[i];
        DialogueRecord rec;
        if (item.contains("turns") && item.contains("summaries")) {
            rec = record_from_json(item, in + " record " + std::to_string(i + 1));
        } else {
            rec = tag == DatasetTag::csds ? csds_item_to_record(item, i) : samsum_item_to_record(item, i);
        }
        validate_schema(rec, tag);
        records.push_back(std::move(rec));
    }
    save_records(out, records);
    std::cout << "wrote " << records.size() << " records to " << out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// build-tokenizer
// ---------------------------------------------------------------------------

// Normalized JSONL contributes turn and summary texts; anything else is
// consumed as one block of plain text.
void collect_corpus_text(const std::string& path, std::vector<std::string>& corpus) {
    std::string text = read_file(path);
    size_t probe = text.find_first_not_of(" \t\r\n");
    if (probe != std::string::npos && text[probe] == '{') {
        nlohmann::json first = nlohmann::json::parse(
            text.substr(probe, text.find('\n', probe) - probe), nullptr, false);
        if (!first.is_discarded() && first.is_object() && first.contains("turns")) {
            for (const nlohmann::json& item : parse_items(path)) {
                if (item.contains("turns"))
                    for (const nlohmann::json& turn : item.at("turns"))
                        if (turn.contains("text")) corpus.push_back(turn.at("text").get<std::string>());
                if (item.contains("summaries"))
                    for (const auto& [type, summary] : item.at("summaries").items())
                        corpus.push_back(summary.get<std::string>());
            }
            return;
        }
    }
    corpus.push_back(std::move(text));
}

int cmd_build_tokenizer(const std::vector<std::string>& corpus_paths, int vocab_size,
                        const std::string& out, bool char_level) {
    std::vector<std::string> corpus;
    for (const std::string& path : corpus_paths) collect_corpus_text(path, corpus);
    TokenizerModel tok =
        train_bpe(corpus, static_cast<size_t>(vocab_size), {"<s>", "</s>", "<pad>"}, char_level);
    tok.save(out);
    std::printf("tokenizer: %zu tokens, compression %.4f tokens/char, hash %s\n", tok.vocab_size(),
                tok.compression_rate(corpus), hex64(tok.hash()).c_str());
    std::printf("saved to %s\n", out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

int cmd_stats(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& data, const std::string& tokenizer_path, size_t bucket_width,
              size_t threshold) {
    RunConfig rc = make_run_config(config_path, sets);
    TokenizerModel tok = TokenizerModel::load(tokenizer_path);
    std::vector<DialogueRecord> records = load_records(data, rc.dataset);
    std::vector<InstructionSample> samples = build_instruction_samples(records, rc.dataset, rc.boundary);
    StatsReport report = dataset_stats(samples, tok, bucket_width, threshold);
    std::cout << report.to_json().dump(2) << "\n";
    std::printf("%zu records -> %zu samples; dialogue mean %.1f tokens (max %zu); summary mean %.1f "
                "tokens (max %zu); %.1f%% of dialogues under %zu tokens\n",
                records.size(), report.sample_count, report.dialogue.mean, report.dialogue.max_value,
                report.summary.mean, report.summary.max_value,
                100.0 * report.dialogue.fraction_under_threshold(), threshold);
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& data, const std::string& tokenizer_path, const std::string& out) {
    RunConfig rc = make_run_config(config_path, sets);
    TokenizerModel tok = TokenizerModel::load(tokenizer_path);
    std::vector<DialogueRecord> records = load_records(data, rc.dataset);
    std::vector<InstructionSample> samples = build_instruction_samples(records, rc.dataset, rc.boundary);
    TokenizeReport tkr;
    TokenizeOptions topt;
    topt.max_len = rc.max_len;
    topt.prompt_loss = rc.prompt_loss;
    std::vector<TokenizedSample> dataset = tokenize_samples(samples, tok, topt, &tkr);
    if (dataset.empty()) throw DataError("no usable samples after tokenization");
    if (tkr.skipped > 0)
        std::fprintf(stderr, "warning: skipped %zu over-long samples (first id: %s)\n", tkr.skipped,
                     tkr.skipped_ids.front().c_str());

    fs::path run_dir = out;
    RunLock lock(run_dir);
    std::vector<fs::path> inputs = {data, tokenizer_path};
    if (!config_path.empty()) inputs.insert(inputs.begin(), config_path);
    write_manifest(run_dir, rc.json, inputs);

    ModelConfig mcfg = rc.model;
    mcfg.vocab_size = static_cast<int>(tok.vocab_size());
    mcfg.validate();
    Parameters params = Parameters::init(mcfg, rc.init_seed);
    uint64_t tok_hash = tok.hash();

    std::optional<LoraAdapter> adapter;
    uint64_t base_hash = 0;
    if (rc.lora_enabled) {
        adapter = attach(params, rc.lora);
        base_hash = model_hash(params);
    }

    fs::create_directories(run_dir / "checkpoints");
    CheckpointFn save_cb = [&](int step, const Parameters& p, const LoraAdapter* ad) {
        fs::path dir = run_dir / "checkpoints";
        if (ad) {
            save_adapter_checkpoint(dir / ("step_" + std::to_string(step) + ".adapter.ckpt"),
                                    ad->config, ad->weights, base_hash, tok_hash, step);
        } else {
            save_model_checkpoint(dir / ("step_" + std::to_string(step) + ".model.ckpt"), mcfg, p,
                                  tok_hash, mix_seed({rc.train.seed, static_cast<uint64_t>(step)}),
                                  step, rc.neftune);
        }
    };

    TrainResult result = train(params, mcfg, adapter ? &*adapter : nullptr, dataset, rc.train,
                               rc.neftune, tok.pad_id(), save_cb);

    write_loss_csv(result.log, (run_dir / "loss.csv").string());
    save_model_checkpoint(run_dir / "model.ckpt", mcfg, params, tok_hash,
                          mix_seed({rc.train.seed, static_cast<uint64_t>(result.steps_completed)}),
                          result.steps_completed, rc.neftune);
    if (adapter)
        save_adapter_checkpoint(run_dir / "adapter.ckpt", adapter->config, adapter->weights,
                                base_hash, tok_hash, result.steps_completed);

    if (result.aborted_non_finite)
        throw NumericError("training aborted on non-finite loss after step " +
                           std::to_string(result.steps_completed) + " (artifacts in " + out + ")");

    double last_loss = result.log.empty() ? 0.0 : result.log.back().loss;
    std::printf("trained %d steps over %d epoch(s)%s; final loss %.6f\n", result.steps_completed,
                result.epochs_started, result.stopped_early ? " (stopped early)" : "", last_loss);
    std::printf("run directory: %s\n", out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct PromptItem {
    std::string id;
    std::string text;
};

// Text files contribute one prompt per line. JSONL lines either carry
// {"id", "prompt"} directly or are normalized records, which expand into
// their instruction prompts (one per summary type).
std::vector<PromptItem> load_prompts(const std::string& path, const RunConfig& rc) {
    std::string text = read_file(path);
    size_t probe = text.find_first_not_of(" \t\r\n");
    std::vector<PromptItem> prompts;
    if (probe != std::string::npos && text[probe] == '{') {
        std::vector<nlohmann::json> items = parse_items(path);
        for (size_t i = 0; i < items.size(); ++i) {
            const nlohmann::json& item = items[i];
            if (item.contains("prompt")) {
                PromptItem p;
                if (item.contains("id"))
                    p.id = item.at("id").is_string() ? item.at("id").get<std::string>()
                                                     : item.at("id").dump();
                else
                    p.id = "line-" + std::to_string(i + 1);
                p.text = item.at("prompt").get<std::string>();
                prompts.push_back(std::move(p));
            } else if (item.contains("turns")) {
                DialogueRecord rec =
                    record_from_json(item, path + " record " + std::to_string(i + 1));
                validate_schema(rec, rc.dataset);
                std::vector<SummaryType> types =
                    rc.dataset == DatasetTag::csds
                        ? std::vector<SummaryType>{SummaryType::agent, SummaryType::user, SummaryType::all}
                        : std::vector<SummaryType>{SummaryType::all};
                for (SummaryType type : types) {
                    InstructionSample sample = make_sample(rec, rc.dataset, type, rc.boundary);
                    prompts.push_back({rec.id + "#" + summary_type_name(type), sample.prompt_text});
                }
            } else {
                throw DataError(path + " record " + std::to_string(i + 1) +
                                ": expected a \"prompt\" field or a normalized record");
            }
        }
    } else {
        size_t start = 0;
        size_t line_no = 0;
        while (start <= text.size()) {
            size_t end = text.find('\n', start);
            std::string line =
                text.substr(start, end == std::string::npos ? std::string::npos : end - start);
            start = end == std::string::npos ? text.size() + 1 : end + 1;
            ++line_no;
            while (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            prompts.push_back({"line-" + std::to_string(line_no), std::move(line)});
        }
    }
    if (prompts.empty()) throw DataError("no prompts found in " + path);
    return prompts;
}

int cmd_generate(const std::string& config_path, const std::vector<std::string>& sets,
                 const std::string& model_path, const std::string& adapter_path,
                 const std::string& tokenizer_path, const std::string& prompt_file,
                 const std::string& out, uint64_t seed,
                 std::vector<std::pair<std::string, std::string>> decode_flags) {
    RunConfig rc = make_run_config(config_path, sets, std::move(decode_flags));
    TokenizerModel tok = TokenizerModel::load(tokenizer_path);
    ModelCheckpoint mc = load_model_checkpoint(model_path);
    if (mc.tokenizer_hash != tok.hash())
        throw ConfigError("tokenizer does not match the model checkpoint (expected hash " +
                          hex64(mc.tokenizer_hash) + ", got " + hex64(tok.hash()) + ")");
    Parameters params = std::move(mc.params);
    if (!adapter_path.empty()) {
        AdapterCheckpoint ac = load_adapter_checkpoint(adapter_path);
        if (ac.tokenizer_hash != tok.hash())
            throw ConfigError("tokenizer does not match the adapter checkpoint");
        LoraAdapter adapter = restore_adapter(ac, params);
        params = merge(params, adapter);
    }

    std::vector<PromptItem> prompts = load_prompts(prompt_file, rc);
    DecodeConfig dc = rc.decode;
    std::string lines;
    for (size_t i = 0; i < prompts.size(); ++i) {
        const PromptItem& p = prompts[i];
        bool has_boundary = p.text.rfind(boundary_open(), 0) == 0;
        std::vector<int> ids = tok.encode(p.text, !has_boundary);
        Rng rng(mix_seed({seed, static_cast<uint64_t>(i)}));
        DecodeResult result;
        try {
            result = decode(params, mc.config, ids, dc, &rng);
        } catch (const DataError& e) {
            throw DataError("prompt " + p.id + ": " + e.what());
        }
        nlohmann::json line = {
            {"id", p.id}, {"prompt", p.text}, {"generation", tok.decode(result.ids, true)}};
        // An undertrained byte-level model can emit invalid UTF-8; replace
        // rather than abort.
        lines += line.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
    }
    write_file(out, lines);
    std::printf("generated %zu completions to %s\n", prompts.size(), out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

int cmd_evaluate(const std::string& config_path, const std::vector<std::string>& sets,
                 const std::vector<std::string>& candidate_paths, const std::string& data,
                 const std::string& model_path, const std::string& tokenizer_path,
                 const std::string& out) {
    RunConfig rc = make_run_config(config_path, sets);
    std::vector<DialogueRecord> records = load_records(data, rc.dataset);

    // Sample id convention: "<record id>#<summary type>".
    std::map<std::string, std::pair<std::string, std::string>> references;
    for (const DialogueRecord& rec : records)
        for (const auto& [type, summary] : rec.summaries)
            references[rec.id + "#" + summary_type_name(type)] = {summary, summary_type_name(type)};

    TextEmbedFn embed = nullptr;
    if (rc.eval_embed == "model" && !model_path.empty() && !tokenizer_path.empty()) {
        TokenizerModel tok = TokenizerModel::load(tokenizer_path);
        ModelCheckpoint mc = load_model_checkpoint(model_path);
        if (mc.tokenizer_hash != tok.hash())
            throw ConfigError("tokenizer does not match the model checkpoint");
        auto table = std::make_shared<Mat>(std::move(mc.params.token_embedding));
        auto tok_ptr = std::make_shared<TokenizerModel>(std::move(tok));
        embed = [table, tok_ptr](const std::string& token) {
            std::vector<int> ids = tok_ptr->encode(token);
            Vec v = Vec::Zero(table->cols());
            int used = 0;
            for (int id : ids)
                if (id >= 0 && id < table->rows()) {
                    v += table->row(id).transpose();
                    ++used;
                }
            if (used > 0) v /= static_cast<double>(used);
            return v;
        };
    }

    std::vector<MetricReport> reports;
    for (const std::string& path : candidate_paths) {
        std::vector<EvalPair> pairs;
        std::vector<nlohmann::json> items = parse_items(path);
        for (size_t i = 0; i < items.size(); ++i) {
            const nlohmann::json& item = items[i];
            if (!item.contains("id") || !item.contains("generation"))
                throw DataError(path + " record " + std::to_string(i + 1) +
                                ": expected \"id\" and \"generation\" fields");
            std::string id =
                item.at("id").is_string() ? item.at("id").get<std::string>() : item.at("id").dump();
            auto it = references.find(id);
            if (it == references.end())
                throw DataError("candidate id \"" + id + "\" has no reference in " + data);
            pairs.push_back({item.at("generation").get<std::string>(), it->second.first,
                             it->second.second});
        }
        reports.push_back(evaluate_pairs(pairs, embed));
    }
    MetricReport final_report =
        reports.size() == 1 ? std::move(reports.front()) : average_reports(reports);

    nlohmann::json doc = report_json(final_report);
    if (reports.size() > 1) doc["averaged_over"] = reports.size();
    if (!out.empty()) write_file(out, doc.dump(2) + "\n");
    std::cout << report_table(final_report, dataset_tag_name(rc.dataset));
    if (reports.size() > 1)
        std::printf("(mean over %zu candidate sets)\n", reports.size());
    if (!out.empty())
        std::printf("report written to %s\n", out.c_str());
    else
        std::cout << doc.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// compare-runs
// ---------------------------------------------------------------------------

int cmd_compare_runs(const std::string& path_a, const std::string& path_b) {
    MetricReport a = report_from_json(parse_json_file(path_a, "report"));
    MetricReport b = report_from_json(parse_json_file(path_b, "report"));
    nlohmann::json deltas = compare_reports(a, b);

    std::printf("%-8s%-12s%10s%10s%10s  %s\n", "type", "metric", "A", "B", "delta", "larger");
    for (const auto& [type, ta] : a.by_type) {
        const TypeReport& tb = b.by_type.at(type);
        struct Row {
            const char* name;
            double va, vb;
        };
        for (const Row& row : {Row{"rouge1_f1", ta.rouge1.f1, tb.rouge1.f1},
                               Row{"rouge2_f1", ta.rouge2.f1, tb.rouge2.f1},
                               Row{"rougeL_f1", ta.rougeL.f1, tb.rougeL.f1},
                               Row{"bleu", ta.bleu, tb.bleu},
                               Row{"embed_f1", ta.embed.f1, tb.embed.f1}}) {
            const char* larger = row.va == row.vb ? "=" : (row.vb > row.va ? "B" : "A");
            std::printf("%-8s%-12s%10.2f%10.2f%+10.2f  %s\n", type.c_str(), row.name, row.va,
                        row.vb, row.vb - row.va, larger);
        }
    }
    std::cout << deltas.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale instruction-tuning laboratory for dialogue summarization"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    app.add_option("--config", config_path, "JSON run config file")->configurable(false);
    app.add_option("--set", sets, "override a config leaf: key.path=value")->configurable(false);

    // Lets --config and --set appear after the subcommand name too.
    app.fallthrough();

    // build-tokenizer
    auto* tok_cmd = app.add_subcommand("build-tokenizer", "train a byte-level BPE tokenizer");
    std::vector<std::string> tok_corpus;
    int tok_vocab = 1024;
    std::string tok_out;
    bool tok_char_level = false;
    tok_cmd->add_option("--corpus", tok_corpus, "corpus files (plain text or normalized JSONL)")
        ->required()
        ->expected(-1);
    tok_cmd->add_option("--vocab-size", tok_vocab, "target vocabulary size");
    tok_cmd->add_option("--out", tok_out, "output tokenizer file")->required();
    tok_cmd->add_flag("--char-level", tok_char_level, "character vocabulary, no merges");

    // prepare-data
    auto* prep_cmd = app.add_subcommand("prepare-data", "convert a native dataset to normalized JSONL");
    std::string prep_schema, prep_in, prep_out;
    prep_cmd->add_option("--schema", prep_schema, "csds or samsum")->required();
    prep_cmd->add_option("--in", prep_in, "native dataset file (JSON array or JSONL)")->required();
    prep_cmd->add_option("--out", prep_out, "normalized JSONL output")->required();

    // stats
    auto* stats_cmd = app.add_subcommand("stats", "token-length statistics for a prepared dataset");
    std::string stats_data, stats_tok;
    size_t stats_bucket = 128, stats_threshold = 1200;
    stats_cmd->add_option("--data", stats_data, "normalized JSONL dataset")->required();
    stats_cmd->add_option("--tokenizer", stats_tok, "tokenizer file")->required();
    stats_cmd->add_option("--bucket-width", stats_bucket, "histogram bucket width in tokens");
    stats_cmd->add_option("--threshold", stats_threshold, "report fraction of dialogues under this length");

    // train
    auto* train_cmd = app.add_subcommand("train", "run instruction fine-tuning");
    std::string train_data, train_tok, train_out;
    train_cmd->add_option("--data", train_data, "normalized JSONL dataset")->required();
    train_cmd->add_option("--tokenizer", train_tok, "tokenizer file")->required();
    train_cmd->add_option("--out", train_out, "run directory")->required();

    // generate
    auto* gen_cmd = app.add_subcommand("generate", "decode completions for prompts");
    std::string gen_model, gen_adapter, gen_tok, gen_prompts, gen_out, gen_strategy;
    uint64_t gen_seed = 0;
    int gen_beam = -1, gen_max_new = -1;
    double gen_temp = -1.0, gen_top_p = -1.0;
    gen_cmd->add_option("--model", gen_model, "model checkpoint")->required();
    gen_cmd->add_option("--adapter", gen_adapter, "adapter checkpoint to merge");
    gen_cmd->add_option("--tokenizer", gen_tok, "tokenizer file")->required();
    gen_cmd->add_option("--prompt-file", gen_prompts, "prompts: .txt lines or JSONL")->required();
    gen_cmd->add_option("--out", gen_out, "output JSONL")->required();
    gen_cmd->add_option("--strategy", gen_strategy, "greedy, beam, or sample");
    gen_cmd->add_option("--beam-size", gen_beam, "beam width");
    gen_cmd->add_option("--temperature", gen_temp, "sampling temperature");
    gen_cmd->add_option("--top-p", gen_top_p, "nucleus mass");
    gen_cmd->add_option("--max-new-tokens", gen_max_new, "generation cap");
    gen_cmd->add_option("--seed", gen_seed, "sampling seed");

    // evaluate
    auto* eval_cmd = app.add_subcommand("evaluate", "score candidate summaries against references");
    std::vector<std::string> eval_candidates;
    std::string eval_data, eval_model, eval_tok, eval_out;
    eval_cmd->add_option("--candidates", eval_candidates, "candidate JSONL files (several average)")
        ->required()
        ->expected(-1);
    eval_cmd->add_option("--data", eval_data, "normalized JSONL dataset with references")->required();
    eval_cmd->add_option("--model", eval_model, "model checkpoint for embedding scores");
    eval_cmd->add_option("--tokenizer", eval_tok, "tokenizer file for embedding scores");
    eval_cmd->add_option("--out", eval_out, "write the JSON report here");

    // compare-runs
    auto* cmp_cmd = app.add_subcommand("compare-runs", "per-metric deltas between two evaluation reports");
    std::string cmp_a, cmp_b;
    cmp_cmd->add_option("report_a", cmp_a, "baseline report JSON")->required();
    cmp_cmd->add_option("report_b", cmp_b, "comparison report JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (tok_cmd->parsed()) return cmd_build_tokenizer(tok_corpus, tok_vocab, tok_out, tok_char_level);
        if (prep_cmd->parsed()) return cmd_prepare_data(prep_schema, prep_in, prep_out);
        if (stats_cmd->parsed())
            return cmd_stats(config_path, sets, stats_data, stats_tok, stats_bucket, stats_threshold);
        if (train_cmd->parsed()) return cmd_train(config_path, sets, train_data, train_tok, train_out);
        if (gen_cmd->parsed()) {
            std::vector<std::pair<std::string, std::string>> decode_flags;
            if (!gen_strategy.empty()) decode_flags.emplace_back("decode.strategy", gen_strategy);
            if (gen_beam >= 0) decode_flags.emplace_back("decode.beam_size", std::to_string(gen_beam));
            if (gen_temp >= 0.0)
                decode_flags.emplace_back("decode.temperature", std::to_string(gen_temp));
            if (gen_top_p >= 0.0) decode_flags.emplace_back("decode.top_p", std::to_string(gen_top_p));
            if (gen_max_new >= 0)
                decode_flags.emplace_back("decode.max_new_tokens", std::to_string(gen_max_new));
            return cmd_generate(config_path, sets, gen_model, gen_adapter, gen_tok, gen_prompts,
                                gen_out, gen_seed, std::move(decode_flags));
        }
        if (eval_cmd->parsed())
            return cmd_evaluate(config_path, sets, eval_candidates, eval_data, eval_model, eval_tok,
                                eval_out);
        if (cmp_cmd->parsed()) return cmd_compare_runs(cmp_a, cmp_b);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
