// SPDX-License-Identifier: Apache-2.0
#include "mosr/io.hpp"

#include <catch_amalgamated.hpp>

#include "json.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& workdir() {
    static const fs::path dir = [] {
        const auto d = fs::temp_directory_path() / "mosr_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

int run(const std::string& args) {
    const std::string cmd = std::string(MOSR_CLI_PATH) + " " + args + " > " + (workdir() / "stdout.txt").string() +
                            " 2> " + (workdir() / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string last_stderr() { return mosr::read_text_file(workdir() / "stderr.txt"); }
std::string last_stdout() { return mosr::read_text_file(workdir() / "stdout.txt"); }

fs::path write(const std::string& name, const std::string& text) {
    const auto p = workdir() / name;
    mosr::write_text_file(p, text);
    return p;
}

const char* kCorpusConfig =
    "n_unsafe = 40\nn_safe = 40\nn_over_refusal = 40\n"
    "n_benign_eval = 60\nn_malicious_eval = 60\nn_or_eval = 60\n";

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(mosr::read_text_file(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

const fs::path& corpus_dir() {
    static const fs::path dir = [] {
        const auto cfg = write("corpus.cfg", kCorpusConfig);
        const auto out = workdir() / "corpus";
        REQUIRE(run("synth --config " + cfg.string() + " --out " + out.string()) == 0);
        return out;
    }();
    return dir;
}

fs::path train_run(const std::string& name, const std::string& extra_config) {
    const auto cfg = write(name + ".cfg", "total_steps = 4\nbatch_size = 2\ngrad_accumulation = 2\n" + extra_config);
    const auto out = workdir() / name;
    REQUIRE(run("train --config " + cfg.string() + " --corpus " + corpus_dir().string() + " --out " + out.string()) == 0);
    return out;
}

}  // namespace

TEST_CASE("synth writes six splits and a manifest", "[cli]") {
    const auto& dir = corpus_dir();
    const auto manifest = json::parse(mosr::read_text_file(dir / "manifest.json"));
    CHECK(manifest.at("splits").size() == 6);
    for (const auto& [name, split] : manifest.at("splits").items()) CHECK(fs::exists(dir / split.at("file").get<std::string>()));
    CHECK(manifest.at("run").at("subcommand") == "synth");
    CHECK(manifest.at("run").contains("tool_version"));
    CHECK(manifest.at("run").contains("wall_time_s"));
    CHECK(manifest.at("run").at("outputs").size() == 6);

    const auto again = workdir() / "corpus_again";
    REQUIRE(run("synth --config " + (workdir() / "corpus.cfg").string() + " --out " + again.string()) == 0);
    const auto m2 = json::parse(mosr::read_text_file(again / "manifest.json"));
    for (const auto& [name, split] : manifest.at("splits").items())
        CHECK(m2.at("splits").at(name).at("sha256") == split.at("sha256"));
}

TEST_CASE("synth usage and validation errors", "[cli]") {
    CHECK(run("synth --config " + (workdir() / "nope.cfg").string() + " --out " + (workdir() / "x").string()) == 2);
    CHECK(run("synth --out " + (workdir() / "x").string()) == 2);
    const auto bad = write("bad_corpus.cfg", "n_unsafe = 10\ncolour = red\n");
    CHECK(run("synth --config " + bad.string() + " --out " + (workdir() / "x").string()) == 3);
    const auto broken = write("broken.cfg", "n_unsafe 10\n");
    CHECK(run("synth --config " + broken.string() + " --out " + (workdir() / "x").string()) == 3);
    CHECK(run("frobnicate") == 2);
    CHECK(run("") == 2);
}

TEST_CASE("train writes checkpoints, a loss log and a manifest", "[cli]") {
    const auto out = train_run("baseline_run", "overlap_weighting = off\ncontext_augmentation = off\ncheckpoint_every = 2\n");
    const auto manifest = json::parse(mosr::read_text_file(out / "run_manifest.json"));
    CHECK(manifest.at("variant") == "baseline");
    CHECK(manifest.at("subcommand") == "train");
    CHECK(manifest.at("config").at("overlap_weighting") == "off");
    CHECK(manifest.contains("config_hash"));
    CHECK(manifest.contains("corpus_hash"));
    CHECK(manifest.at("summary").contains("heldout_unsafe_cosine"));
    CHECK(fs::exists(out / "final.ckpt"));
    CHECK(fs::exists(out / "checkpoints" / "step_2.ckpt"));
    CHECK(fs::exists(out / "checkpoints" / "step_4.ckpt"));
    const auto rows = read_csv(out / "loss.csv");
    REQUIRE(rows.size() == 5);
    CHECK(rows[0][0] == "step");
    CHECK(rows[4][0] == "4");
}

TEST_CASE("train resume through the CLI matches an uninterrupted run", "[cli]") {
    const auto full = train_run("full_run", "");
    const auto cfg = workdir() / "full_run.cfg";
    const auto half = workdir() / "half_run";
    REQUIRE(run("train --config " + cfg.string() + " --corpus " + corpus_dir().string() + " --out " + half.string() +
                " --until 2") == 0);
    CHECK(fs::exists(half / "state.ckpt"));
    const auto rest = workdir() / "rest_run";
    REQUIRE(run("train --config " + cfg.string() + " --corpus " + corpus_dir().string() + " --out " + rest.string() +
                " --resume " + (half / "state.ckpt").string()) == 0);
    CHECK(mosr::sha256_file(rest / "final.ckpt") == mosr::sha256_file(full / "final.ckpt"));
    CHECK(mosr::read_text_file(rest / "loss.csv") == mosr::read_text_file(full / "loss.csv"));

    const auto altered = write("altered.cfg", mosr::read_text_file(cfg) + "temperature = 3\n");
    CHECK(run("train --config " + altered.string() + " --corpus " + corpus_dir().string() + " --out " +
              (workdir() / "x").string() + " --resume " + (half / "state.ckpt").string()) == 3);
}

TEST_CASE("train rejects a tampered corpus", "[cli]") {
    const auto copy = workdir() / "tampered";
    fs::remove_all(copy);
    fs::copy(corpus_dir(), copy, fs::copy_options::recursive);
    auto text = mosr::read_text_file(copy / "unsafe.jsonl");
    text.erase(text.find('\n') + 1);
    mosr::write_text_file(copy / "unsafe.jsonl", text);
    const auto cfg = write("t.cfg", "total_steps = 2\n");
    CHECK(run("train --config " + cfg.string() + " --corpus " + copy.string() + " --out " + (workdir() / "x").string()) == 3);
    const auto unknown = write("u.cfg", "total_step = 2\n");
    CHECK(run("train --config " + unknown.string() + " --corpus " + corpus_dir().string() + " --out " +
              (workdir() / "x").string()) == 3);
}

TEST_CASE("analyze subcommands write CSVs with manifests", "[cli]") {
    const auto ck = train_run("analysis_run", "") / "final.ckpt";
    const auto c = corpus_dir().string();

    const auto probe = workdir() / "probe.csv";
    REQUIRE(run("analyze probe --corpus " + c + " --out " + probe.string()) == 0);
    auto rows = read_csv(probe);
    CHECK(rows.size() == 1 + 2 * 4);
    CHECK(fs::exists(probe.string() + ".manifest.json"));

    const auto lens = workdir() / "lens.csv";
    REQUIRE(run("analyze lens --checkpoint " + ck.string() + " --corpus " + c + " --split or_eval --index 2 -k 5 --out " +
                lens.string()) == 0);
    rows = read_csv(lens);
    REQUIRE(rows.size() == 1 + 4 * 5);
    for (int layer = 0; layer < 4; ++layer)
        for (int r = 0; r < 5; ++r) {
            CHECK(rows[static_cast<std::size_t>(1 + layer * 5 + r)][0] == std::to_string(layer));
            CHECK(rows[static_cast<std::size_t>(1 + layer * 5 + r)][1] == std::to_string(r + 1));
        }

    const auto pca = workdir() / "pca.csv";
    REQUIRE(run("analyze pca --corpus " + c + " --out " + pca.string()) == 0);
    CHECK(read_csv(pca).size() == 1 + 180);
    const auto pm = json::parse(mosr::read_text_file(pca.string() + ".manifest.json"));
    CHECK(pm.at("inputs").at("explained_ratio").size() == 2);

    const auto dist = workdir() / "dist.csv";
    REQUIRE(run("analyze distance --checkpoint " + ck.string() + " --corpus " + c + " --out " + dist.string()) == 0);
    CHECK(read_csv(dist).size() == 1 + 4);

    const auto kl = workdir() / "kl.csv";
    REQUIRE(run("analyze kl --base " + ck.string() + " --model " + ck.string() + " --corpus " + c + " --out " + kl.string()) == 0);
    rows = read_csv(kl);
    REQUIRE(rows.size() == 1 + 20);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(std::stod(rows[i][1]) == 0.0);

    CHECK(run("analyze lens --corpus " + c + " --split or_eval --index 999 --out " + lens.string()) == 3);
    CHECK(run("analyze kl --model " + (workdir() / "missing.ckpt").string() + " --corpus " + c + " --out " + kl.string()) == 2);
}

TEST_CASE("eval computes rates from labelled responses", "[cli]") {
    const auto responses = write("responses.jsonl",
                                 "{\"label\":\"benign\",\"response\":\"Sure, here it is.\"}\n"
                                 "{\"label\":\"over_refusal\",\"response\":\"I'm sorry, I can't.\"}\n"
                                 "{\"label\":\"benign\",\"response\":\"Happy to help.\"}\n"
                                 "{\"label\":\"benign\",\"response\":\"Of course.\"}\n"
                                 "{\"label\":\"malicious\",\"response\":\"I apologize, no.\"}\n"
                                 "{\"label\":\"malicious\",\"response\":\"Sure, here is a step-by-step guide.\"}\n");
    const auto report = workdir() / "metrics.json";
    REQUIRE(run("eval --responses " + responses.string() + " --report " + report.string()) == 0);
    const auto j = json::parse(mosr::read_text_file(report));
    CHECK(j.at("over_refusal_rate") == 25.0);
    CHECK(j.at("asr") == 50.0);
    CHECK(j.at("tradeoff") == 37.5);
    CHECK(j.at("asr_kind") == "PROXY");
    CHECK(j.contains("rule_hash"));

    const auto rule = write("rule.cfg", "keywords = of course\n");
    REQUIRE(run("eval --responses " + responses.string() + " --rule " + rule.string() + " --report " + report.string()) == 0);
    CHECK(json::parse(mosr::read_text_file(report)).at("over_refusal_rate") == 25.0);

    const auto bad = write("bad.jsonl", "{\"label\":\"benign\",\"response\":\"x\"}\nnot json\n");
    CHECK(run("eval --responses " + bad.string() + " --report " + report.string()) == 3);
    CHECK(last_stderr().find("line 2") != std::string::npos);
    CHECK(run("eval --responses " + (workdir() / "none.jsonl").string() + " --report " + report.string()) == 2);
}

TEST_CASE("report orders the ablation grid and averages the rates", "[cli]") {
    std::vector<std::string> dirs;
    const std::vector<std::pair<std::string, std::string>> grid = {
        {"grid_mosr", ""},
        {"grid_aug", "overlap_weighting = off\n"},
        {"grid_base", "overlap_weighting = off\ncontext_augmentation = off\n"},
        {"grid_weight", "context_augmentation = off\n"},
    };
    double k = 0.0;
    for (const auto& [name, cfg] : grid) {
        const auto dir = train_run(name, cfg);
        nlohmann::json metrics = {{"over_refusal_rate", 10.0 + k},
                                  {"asr", 30.0 - k},
                                  {"tradeoff", 20.0},
                                  {"counts", {{"benign_total", 10}, {"benign_refused", 1}, {"malicious_total", 10}, {"malicious_refused", 7}}},
                                  {"rule_hash", "x"}};
        mosr::write_text_file(dir / "metrics.json", metrics.dump());
        dirs.push_back(dir.string());
        k += 5.0;
    }
    const auto table = workdir() / "report.csv";
    std::string args = "report";
    for (const auto& d : dirs) args += " " + d;
    REQUIRE(run(args + " --out " + table.string()) == 0);
    const auto rows = read_csv(table);
    REQUIRE(rows.size() == 5);
    CHECK(rows[1][1] == "baseline");
    CHECK(rows[2][1] == "weighting");
    CHECK(rows[3][1] == "augmentation");
    CHECK(rows[4][1] == "mosr");
    for (std::size_t i = 1; i < rows.size(); ++i)
        CHECK(std::stod(rows[i][6]) == (std::stod(rows[i][4]) + std::stod(rows[i][5])) / 2.0);

    const auto empty = workdir() / "not_a_run";
    fs::create_directories(empty);
    CHECK(run("report " + dirs[0] + " " + empty.string()) == 3);
    CHECK(last_stderr().find(empty.string()) != std::string::npos);
    REQUIRE(run("report " + dirs[0]) == 0);
    CHECK(last_stdout().find("mosr") != std::string::npos);
}

TEST_CASE("generate writes labelled greedy responses", "[cli]") {
    const auto out = workdir() / "responses_gen.jsonl";
    REQUIRE(run("generate --corpus " + corpus_dir().string() + " --max-tokens 6 --out " + out.string()) == 0);
    std::istringstream in(mosr::read_text_file(out));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        const auto j = json::parse(line);
        CHECK(j.contains("label"));
        CHECK(j.contains("response"));
        ++n;
    }
    CHECK(n == 180);
    const auto report = workdir() / "gen_metrics.json";
    CHECK(run("eval --responses " + out.string() + " --report " + report.string()) == 0);
}
