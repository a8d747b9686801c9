// End-to-end checks of the command-line binary: every subcommand runs
// against a miniature dataset, artifacts land where documented, and the
// exit-code taxonomy holds. Invoked with the binary path as argv[1].

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

int g_failures = 0;

#define EXPECT(cond)                                                              \
    do {                                                                          \
        if (!(cond)) {                                                            \
            ++g_failures;                                                         \
            std::cout << "FAIL " << __FILE__ << ":" << __LINE__ << "  " << #cond \
                      << "\n";                                                    \
        }                                                                         \
    } while (0)

std::string g_bin;
fs::path g_dir;

int run(const std::string& args, const std::string& capture_to = {}) {
    std::string cmd = g_bin + " " + args;
    if (!capture_to.empty()) cmd += " > " + capture_to + " 2>&1";
    int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    if (WIFEXITED(rc)) return WEXITSTATUS(rc);
    return 128;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

size_t line_count(const std::string& text) {
    size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

nlohmann::json first_json_in(const std::string& text) {
    size_t at = text.find('{');
    if (at == std::string::npos) return nlohmann::json();
    return nlohmann::json::parse(text.substr(at), nullptr, false);
}

const char* kCsdsNative = R"JSON([
  {"DialogueID": 7, "Dialogue": [
     {"turn": 1, "speaker": "Q", "utterance": "你好，我的订单1234还没有发货。"},
     {"turn": 2, "speaker": "A", "utterance": "您好，马上为您查询。"},
     {"turn": 3, "speaker": "A", "utterance": "订单今天会发出，请耐心等待。"},
     {"turn": 4, "speaker": "Q", "utterance": "好的，谢谢。"}],
   "FinalSumm": ["用户询问订单1234的发货情况。", "客服表示订单今天会发出。"],
   "UserSumm": ["用户询问订单1234什么时候发货。"],
   "AgentSumm": ["客服查询后表示订单今天发出。"]},
  {"Dialogue": [
     {"turn": 1, "speaker": "Q", "utterance": "怎么退货？"},
     {"turn": 2, "speaker": "A", "utterance": "在订单页面点击退货按钮即可。"}],
   "FinalSumm": "用户询问退货流程，客服给出操作指引。",
   "UserSumm": "用户询问怎么退货。",
   "AgentSumm": "客服告知在订单页面点击退货按钮。"}
])JSON";

const char* kSamsumNative =
    "{\"id\": \"a1\", \"dialogue\": \"Amanda: I baked cookies. Do you want some?\\r\\nJerry: "
    "Sure!\", \"summary\": \"Amanda baked cookies and will share them with Jerry.\"}\n";

std::string q(const fs::path& p) { return p.string(); }

void test_prepare_data() {
    spit(g_dir / "csds_raw.json", kCsdsNative);
    spit(g_dir / "samsum_raw.jsonl", kSamsumNative);
    EXPECT(run("prepare-data --schema csds --in " + q(g_dir / "csds_raw.json") + " --out " +
               q(g_dir / "csds.jsonl")) == 0);
    EXPECT(run("prepare-data --schema samsum --in " + q(g_dir / "samsum_raw.jsonl") + " --out " +
               q(g_dir / "samsum.jsonl")) == 0);
    std::string csds = slurp(g_dir / "csds.jsonl");
    EXPECT(line_count(csds) == 2);
    EXPECT(csds.find("\"id\":\"7\"") != std::string::npos);
    EXPECT(csds.find("客服查询后表示订单今天发出。") != std::string::npos);
    std::string samsum = slurp(g_dir / "samsum.jsonl");
    EXPECT(line_count(samsum) == 1);
    EXPECT(samsum.find("\"name\":\"Amanda\"") != std::string::npos);

    // Native CSDS records missing a required summary are rejected.
    spit(g_dir / "broken.json", R"([{"Dialogue": [{"speaker": "Q", "utterance": "x"}],
                                     "FinalSumm": "y", "UserSumm": "z"}])");
    EXPECT(run("prepare-data --schema csds --in " + q(g_dir / "broken.json") + " --out " +
               q(g_dir / "nope.jsonl")) == 3);
}

void test_build_tokenizer_and_stats() {
    EXPECT(run("build-tokenizer --corpus " + q(g_dir / "csds.jsonl") + " " +
               q(g_dir / "samsum.jsonl") + " --vocab-size 400 --out " + q(g_dir / "tok.json")) == 0);
    EXPECT(fs::exists(g_dir / "tok.json"));
    EXPECT(run("stats --data " + q(g_dir / "csds.jsonl") + " --tokenizer " + q(g_dir / "tok.json"),
               q(g_dir / "stats.out")) == 0);
    std::string out = slurp(g_dir / "stats.out");
    EXPECT(out.find("\"samples\": 6") != std::string::npos);
    EXPECT(out.find("summary_tokens") != std::string::npos);
}

std::string small_model_flags() {
    return " --set model.d_model=32 --set model.n_heads=2 --set model.n_layers=2"
           " --set model.ffn_dim=48 --set model.max_seq=256 --set data.max_len=192"
           " --set lora.rank=4 --set lora.alpha=8";
}

void test_train_run_directory() {
    spit(g_dir / "run.json", R"({"train": {"iterations": 2, "checkpoint_every": 2}})");
    int rc = run("train --config " + q(g_dir / "run.json") + " --data " + q(g_dir / "csds.jsonl") +
                 " --tokenizer " + q(g_dir / "tok.json") + " --out " + q(g_dir / "run1") +
                 " --set train.iterations=6 --set train.checkpoint_every=3" + small_model_flags());
    EXPECT(rc == 0);
    EXPECT(fs::exists(g_dir / "run1" / "manifest.json"));
    EXPECT(fs::exists(g_dir / "run1" / "loss.csv"));
    EXPECT(fs::exists(g_dir / "run1" / "model.ckpt"));
    EXPECT(fs::exists(g_dir / "run1" / "adapter.ckpt"));
    EXPECT(fs::exists(g_dir / "run1" / "checkpoints" / "step_3.adapter.ckpt"));
    EXPECT(fs::exists(g_dir / "run1" / "checkpoints" / "step_6.adapter.ckpt"));
    EXPECT(!fs::exists(g_dir / "run1" / "run.lock"));

    std::string csv = slurp(g_dir / "run1" / "loss.csv");
    EXPECT(csv.rfind("step,lr,loss\n", 0) == 0);
    EXPECT(line_count(csv) == 7);

    // The manifest alone reconstructs the run's full config; the flag beat
    // the config file for iterations.
    nlohmann::json manifest = nlohmann::json::parse(slurp(g_dir / "run1" / "manifest.json"));
    EXPECT(manifest.at("config").at("train").at("iterations") == 6);
    EXPECT(manifest.at("config").at("train").at("checkpoint_every") == 3);
    EXPECT(manifest.at("config").at("model").at("d_model") == 32);
    EXPECT(manifest.at("inputs").size() == 3);
    for (const auto& [path, hash] : manifest.at("inputs").items()) {
        EXPECT(fs::exists(path));
        EXPECT(hash.get<std::string>().size() == 16);
    }

    // A second writer is refused while the lock is present.
    spit(g_dir / "run1" / "run.lock", "active\n");
    EXPECT(run("train --data " + q(g_dir / "csds.jsonl") + " --tokenizer " + q(g_dir / "tok.json") +
               " --out " + q(g_dir / "run1") + small_model_flags()) == 3);
    fs::remove(g_dir / "run1" / "run.lock");
}

void test_generate() {
    int rc = run("generate --model " + q(g_dir / "run1" / "model.ckpt") + " --adapter " +
                 q(g_dir / "run1" / "adapter.ckpt") + " --tokenizer " + q(g_dir / "tok.json") +
                 " --prompt-file " + q(g_dir / "csds.jsonl") + " --out " + q(g_dir / "gen.jsonl") +
                 " --strategy greedy --max-new-tokens 12");
    EXPECT(rc == 0);
    std::string out = slurp(g_dir / "gen.jsonl");
    EXPECT(line_count(out) == 6);
    std::istringstream lines(out);
    std::string line;
    size_t with_fields = 0;
    while (std::getline(lines, line)) {
        nlohmann::json item = nlohmann::json::parse(line, nullptr, false);
        if (!item.is_discarded() && item.contains("id") && item.contains("prompt") &&
            item.contains("generation"))
            ++with_fields;
    }
    EXPECT(with_fields == 6);
    EXPECT(out.find("7#agent") != std::string::npos);
    EXPECT(out.find("7#user") != std::string::npos);
    EXPECT(out.find("7#all") != std::string::npos);

    // Plain-text prompt files work too, one prompt per line.
    spit(g_dir / "prompts.txt", "你好\n");
    EXPECT(run("generate --model " + q(g_dir / "run1" / "model.ckpt") + " --tokenizer " +
               q(g_dir / "tok.json") + " --prompt-file " + q(g_dir / "prompts.txt") + " --out " +
               q(g_dir / "gen_txt.jsonl") + " --max-new-tokens 4") == 0);
    EXPECT(slurp(g_dir / "gen_txt.jsonl").find("line-1") != std::string::npos);

    // A tokenizer other than the training one is refused.
    EXPECT(run("build-tokenizer --corpus " + q(g_dir / "samsum.jsonl") +
               " --vocab-size 300 --out " + q(g_dir / "tok2.json")) == 0);
    EXPECT(run("generate --model " + q(g_dir / "run1" / "model.ckpt") + " --tokenizer " +
               q(g_dir / "tok2.json") + " --prompt-file " + q(g_dir / "prompts.txt") + " --out " +
               q(g_dir / "gen_bad.jsonl")) == 2);
}

void test_evaluate_and_compare() {
    // References as candidates: every ROUGE lands at exactly 100.
    std::string perfect;
    std::istringstream lines(slurp(g_dir / "csds.jsonl"));
    std::string line;
    while (std::getline(lines, line)) {
        nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded()) continue;
        for (const auto& [type, summary] : rec.at("summaries").items()) {
            nlohmann::json cand = {{"id", rec.at("id").get<std::string>() + "#" + type},
                                   {"generation", summary}};
            perfect += cand.dump() + "\n";
        }
    }
    spit(g_dir / "perfect.jsonl", perfect);
    EXPECT(run("evaluate --candidates " + q(g_dir / "perfect.jsonl") + " --data " +
               q(g_dir / "csds.jsonl") + " --out " + q(g_dir / "perfect.json"),
               q(g_dir / "eval.out")) == 0);
    nlohmann::json report = nlohmann::json::parse(slurp(g_dir / "perfect.json"));
    for (const char* type : {"all", "user", "agent"}) {
        EXPECT(std::abs(report.at("types").at(type).at("rouge1").at("f1").get<double>() - 100.0) <
               1e-9);
        EXPECT(std::abs(report.at("types").at(type).at("rougeL").at("f1").get<double>() - 100.0) <
               1e-9);
    }

    // Real generations score somewhere in [0, 100] and produce a table.
    EXPECT(run("evaluate --candidates " + q(g_dir / "gen.jsonl") + " --data " +
               q(g_dir / "csds.jsonl") + " --out " + q(g_dir / "gen_report.json") + " --model " +
               q(g_dir / "run1" / "model.ckpt") + " --tokenizer " + q(g_dir / "tok.json"),
               q(g_dir / "eval2.out")) == 0);
    std::string table = slurp(g_dir / "eval2.out");
    EXPECT(table.find("EmbedScore") != std::string::npos);
    EXPECT(table.find("published reference") != std::string::npos);

    // Averaging over several candidate files is accepted.
    EXPECT(run("evaluate --candidates " + q(g_dir / "perfect.jsonl") + " " +
               q(g_dir / "perfect.jsonl") + " --data " + q(g_dir / "csds.jsonl") + " --out " +
               q(g_dir / "avg.json")) == 0);
    nlohmann::json avg = nlohmann::json::parse(slurp(g_dir / "avg.json"));
    EXPECT(avg.at("averaged_over") == 2);
    EXPECT(std::abs(avg.at("types").at("all").at("rouge1").at("f1").get<double>() - 100.0) < 1e-9);

    // A report compared with itself is all-zero deltas.
    EXPECT(run("compare-runs " + q(g_dir / "perfect.json") + " " + q(g_dir / "perfect.json"),
               q(g_dir / "cmp.out")) == 0);
    std::string cmp = slurp(g_dir / "cmp.out");
    nlohmann::json deltas = first_json_in(cmp);
    EXPECT(!deltas.is_discarded() && deltas.is_object());
    for (const auto& [type, row] : deltas.items())
        for (const auto& [metric, value] : row.items()) EXPECT(value.get<double>() == 0.0);
    EXPECT(cmp.find("larger") != std::string::npos);

    // Two different reports give signed deltas both ways.
    EXPECT(run("compare-runs " + q(g_dir / "perfect.json") + " " + q(g_dir / "gen_report.json"),
               q(g_dir / "cmp2.out")) == 0);
    nlohmann::json d2 = first_json_in(slurp(g_dir / "cmp2.out"));
    EXPECT(d2.at("all").at("rouge1_f1").get<double>() <= 0.0);
}

void test_exit_codes() {
    EXPECT(run("stats --data " + q(g_dir / "csds.jsonl") + " --tokenizer " + q(g_dir / "tok.json") +
               " --set train.lr=1", q(g_dir / "err.out")) == 2);
    EXPECT(slurp(g_dir / "err.out").find("train.lr") != std::string::npos);
    EXPECT(run("stats --data " + q(g_dir / "absent.jsonl") + " --tokenizer " +
               q(g_dir / "tok.json")) == 3);
    EXPECT(run("train --data " + q(g_dir / "csds.jsonl") + " --tokenizer " + q(g_dir / "tok.json") +
               " --out " + q(g_dir / "run_nf") + small_model_flags() +
               " --set train.iterations=6 --set train.learning_rate=1e200"
               " --set lora.enabled=false", q(g_dir / "nf.out")) == 4);
    EXPECT(run("no-such-command") == 2);
    EXPECT(run("--help", q(g_dir / "help.out")) == 0);
    EXPECT(slurp(g_dir / "help.out").find("compare-runs") != std::string::npos);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: cli_integration <path-to-sumtune-binary>\n";
        return 2;
    }
    g_bin = argv[1];
    g_dir = fs::temp_directory_path() / "sumtune_cli_itest";
    fs::remove_all(g_dir);
    fs::create_directories(g_dir);

    test_prepare_data();
    test_build_tokenizer_and_stats();
    test_train_run_directory();
    test_generate();
    test_evaluate_and_compare();
    test_exit_codes();

    if (g_failures == 0) {
        std::cout << "cli integration: all checks passed\n";
        return 0;
    }
    std::cout << "cli integration: " << g_failures << " check(s) failed\n";
    return 1;
}
