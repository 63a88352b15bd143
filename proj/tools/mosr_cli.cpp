// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: synth, train, generate, analyze, eval, report.
// Exit codes: 0 success, 2 usage, 3 validation, 4 numeric failure.

#include "mosr/analysis.hpp"
#include "mosr/checkpoint.hpp"
#include "mosr/data.hpp"
#include "mosr/eval.hpp"
#include "mosr/io.hpp"
#include "mosr/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "mosr 0.1.0";

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Clock {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

json base_manifest(const std::string& subcommand, const Clock& clock) {
    return {{"subcommand", subcommand}, {"tool_version", kToolVersion}, {"wall_time_s", clock.seconds()}};
}

void write_json(const fs::path& path, const json& j) { mosr::write_text_file(path, j.dump(2) + "\n"); }

fs::path sidecar_manifest(const fs::path& output) { return fs::path(output.string() + ".manifest.json"); }

// ---------------------------------------------------------------- synth

const std::vector<std::string> kModelKeys = {"model_vocab_size", "model_n_layers",    "model_hidden_dim",
                                             "model_n_heads",    "model_max_seq_len", "model_seed"};

mosr::ModelConfig model_config_from_kv(const mosr::KeyValueConfig& kv) {
    mosr::ModelConfig m;
    auto geti = [&](const char* k, int d) { return static_cast<int>(kv.get_int(k, d)); };
    m.vocab_size = geti("model_vocab_size", m.vocab_size);
    m.n_layers = geti("model_n_layers", m.n_layers);
    m.hidden_dim = geti("model_hidden_dim", m.hidden_dim);
    m.n_heads = geti("model_n_heads", m.n_heads);
    m.max_seq_len = geti("model_max_seq_len", m.max_seq_len);
    m.seed = static_cast<std::uint64_t>(kv.get_int("model_seed", static_cast<long long>(m.seed)));
    m.validate();
    return m;
}

int cmd_synth(const fs::path& config_path, const fs::path& out) {
    Clock clock;
    require_file(config_path, "config file");
    const auto kv = mosr::KeyValueConfig::load(config_path);
    auto known = mosr::CorpusConfig::known_keys();
    known.insert(known.end(), kModelKeys.begin(), kModelKeys.end());
    const auto unknown = kv.unknown_keys(known);
    if (!unknown.empty()) throw mosr::ValidationError("synth config: unknown key '" + unknown.front() + "'");
    mosr::KeyValueConfig corpus_kv;
    for (const auto& [k, v] : kv.values())
        if (std::find(kModelKeys.begin(), kModelKeys.end(), k) == kModelKeys.end()) corpus_kv.set(k, v);
    const auto corpus_cfg = mosr::CorpusConfig::from_kv(corpus_kv);
    const auto model_cfg = model_config_from_kv(kv);
    const auto corpus = mosr::synth_corpus(corpus_cfg, model_cfg);
    mosr::save_corpus(out, corpus, corpus_cfg, model_cfg);

    // The corpus manifest doubles as the run manifest.
    const fs::path manifest_path = out / "manifest.json";
    json manifest = json::parse(mosr::read_text_file(manifest_path));
    manifest["run"] = base_manifest("synth", clock);
    manifest["run"]["inputs"] = {{"config", config_path.string()},
                                 {"config_sha256", mosr::sha256_file(config_path)}};
    json outputs = json::array();
    for (auto s : mosr::kAllSplits) outputs.push_back((out / mosr::split_file_name(s)).string());
    manifest["run"]["outputs"] = outputs;
    write_json(manifest_path, manifest);
    std::cout << "wrote corpus " << out.string() << " (hash " << manifest.at("corpus_hash").get<std::string>() << ")\n";
    return 0;
}

// ---------------------------------------------------------------- train

mosr::TrainConfig load_train_config(const fs::path& path) {
    require_file(path, "config file");
    auto cfg = mosr::TrainConfig::from_kv(mosr::KeyValueConfig::load(path));
    return cfg;
}

mosr::LoadedCorpus open_corpus(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json")) throw UsageError("corpus manifest not found in " + dir.string());
    return mosr::load_corpus(dir);
}

int cmd_train(const fs::path& config_path, const fs::path& corpus_dir, const fs::path& out,
              const std::optional<fs::path>& resume, std::optional<int> until) {
    Clock clock;
    const auto cfg = load_train_config(config_path);
    const auto loaded = open_corpus(corpus_dir);
    cfg.validate(loaded.model_config);

    std::optional<mosr::Trainer> trainer;
    if (resume) {
        require_file(*resume, "checkpoint");
        trainer.emplace(mosr::Trainer::resume(*resume, cfg, loaded.corpus));
    } else {
        trainer.emplace(cfg, loaded.corpus, loaded.model_config);
    }
    fs::create_directories(out);
    const int stop = std::min(until.value_or(cfg.total_steps), cfg.total_steps);
    json checkpoints = json::array();
    while (trainer->step() < stop) {
        trainer->run_step();
        if (cfg.checkpoint_every > 0 && trainer->step() % cfg.checkpoint_every == 0) {
            const fs::path p = out / "checkpoints" / ("step_" + std::to_string(trainer->step()) + ".ckpt");
            fs::create_directories(p.parent_path());
            trainer->save(p);
            checkpoints.push_back(p.string());
        }
    }
    const fs::path state = out / (trainer->finished() ? "final.ckpt" : "state.ckpt");
    trainer->save(state);
    mosr::write_text_file(out / "loss.csv", trainer->loss_csv());

    json manifest = base_manifest("train", clock);
    manifest["variant"] = cfg.variant();
    manifest["config"] = cfg.to_kv().values();
    manifest["config_hash"] = cfg.hash();
    manifest["corpus_dir"] = corpus_dir.string();
    manifest["corpus_hash"] = trainer->corpus_hash();
    manifest["step"] = trainer->step();
    manifest["finished"] = trainer->finished();
    if (resume) manifest["resumed_from"] = resume->string();
    manifest["outputs"] = {{"checkpoint", state.string()},
                           {"loss_csv", (out / "loss.csv").string()},
                           {"intermediate_checkpoints", checkpoints}};
    if (trainer->finished()) {
        const auto summary = mosr::summarize(*trainer, loaded.corpus);
        json dist = json::object();
        for (auto [l, d] : summary.benign_or_distance) dist[std::to_string(l)] = d;
        manifest["summary"] = {{"heldout_unsafe_cosine", summary.heldout_unsafe_cosine},
                               {"heldout_benign_retain", summary.heldout_benign_retain},
                               {"benign_or_distance", dist}};
    }
    write_json(out / "run_manifest.json", manifest);
    std::cout << "trained " << cfg.variant() << " to step " << trainer->step() << " -> " << state.string() << "\n";
    return 0;
}

// ------------------------------------------------------------- generate

mosr::TransformerModel model_for(const std::optional<fs::path>& checkpoint, const mosr::LoadedCorpus& corpus) {
    if (!checkpoint) return mosr::TransformerModel(corpus.model_config);
    require_file(*checkpoint, "checkpoint");
    auto model = mosr::load_checkpoint(*checkpoint).model;
    if (model.config().vocab_size != corpus.model_config.vocab_size)
        throw mosr::InputError("checkpoint vocabulary differs from the corpus model");
    return model;
}

int cmd_generate(const std::optional<fs::path>& checkpoint, const fs::path& corpus_dir, const fs::path& out,
                 int max_tokens) {
    Clock clock;
    const auto loaded = open_corpus(corpus_dir);
    const auto model = model_for(checkpoint, loaded);
    const auto vocab = mosr::Vocabulary::synthetic(loaded.model_config.vocab_size);
    std::ostringstream lines;
    std::size_t count = 0;
    for (auto split : {mosr::Split::benign_eval, mosr::Split::or_eval, mosr::Split::malicious_eval}) {
        for (const auto& s : loaded.corpus.split(split)) {
            auto cont = mosr::greedy_continuation(model, s.prompt, max_tokens);
            const auto eos = std::find(cont.begin(), cont.end(), vocab.eos());
            cont.erase(eos, cont.end());
            lines << json{{"label", mosr::to_string(s.label)}, {"prompt", vocab.decode(s.prompt)},
                          {"response", vocab.decode(cont)}}
                         .dump()
                  << "\n";
            ++count;
        }
    }
    mosr::write_text_file(out, lines.str());
    json manifest = base_manifest("generate", clock);
    manifest["inputs"] = {{"checkpoint", checkpoint ? checkpoint->string() : "base"},
                          {"corpus_dir", corpus_dir.string()},
                          {"corpus_hash", loaded.manifest.at("corpus_hash")}};
    manifest["max_tokens"] = max_tokens;
    manifest["outputs"] = {out.string()};
    write_json(sidecar_manifest(out), manifest);
    std::cout << "wrote " << count << " responses to " << out.string() << "\n";
    return 0;
}

// -------------------------------------------------------------- analyze

std::string csv_number(double v) { return mosr::format_double(v); }

void finish_analysis(const std::string& kind, const fs::path& out, const std::string& csv, json inputs,
                     const Clock& clock) {
    mosr::write_text_file(out, csv);
    json manifest = base_manifest("analyze " + kind, clock);
    manifest["inputs"] = std::move(inputs);
    manifest["outputs"] = {out.string()};
    write_json(sidecar_manifest(out), manifest);
    std::cout << "wrote " << out.string() << "\n";
}

int cmd_probe(const std::optional<fs::path>& checkpoint, const fs::path& corpus_dir, const std::string& kinds,
              std::uint64_t seed, const fs::path& out) {
    Clock clock;
    const auto loaded = open_corpus(corpus_dir);
    const auto model = model_for(checkpoint, loaded);
    const auto benign = mosr::prompts_of(loaded.corpus.benign_eval);
    const auto malicious = mosr::prompts_of(loaded.corpus.malicious_eval);
    const auto over = mosr::prompts_of(loaded.corpus.or_eval);
    std::vector<mosr::ProbeKind> selected;
    if (kinds == "both")
        selected = {mosr::ProbeKind::linear_max_margin, mosr::ProbeKind::feed_forward};
    else
        selected = {mosr::probe_kind_from_string(kinds)};
    std::string csv = "kind,layer,test_accuracy,benign_false_positive_rate,malicious_true_positive_rate,over_refusal_as_malicious\n";
    for (auto kind : selected) {
        mosr::ProbeOptions opt;
        opt.kind = kind;
        opt.seed = seed;
        const auto probe = mosr::train_probe(model, benign, malicious, opt);
        const auto frac = mosr::attribute_over_refusal(probe, over, model);
        for (std::size_t l = 0; l < probe.layers.size(); ++l)
            csv += std::string(mosr::to_string(kind)) + "," + std::to_string(l) + "," +
                   csv_number(probe.test_accuracy[l]) + "," + csv_number(probe.benign_false_positive_rate[l]) + "," +
                   csv_number(probe.malicious_true_positive_rate[l]) + "," + csv_number(frac[l]) + "\n";
    }
    finish_analysis("probe", out, csv,
                    {{"checkpoint", checkpoint ? checkpoint->string() : "base"}, {"corpus_dir", corpus_dir.string()},
                     {"kinds", kinds}, {"seed", seed}},
                    clock);
    return 0;
}

int cmd_lens(const std::optional<fs::path>& checkpoint, const fs::path& corpus_dir, const std::string& split_name,
             int index, int k, const fs::path& out) {
    Clock clock;
    const auto loaded = open_corpus(corpus_dir);
    const auto model = model_for(checkpoint, loaded);
    const auto vocab = mosr::Vocabulary::synthetic(loaded.model_config.vocab_size);
    const auto& split = loaded.corpus.split(mosr::split_from_string(split_name));
    if (index < 0 || index >= static_cast<int>(split.size())) throw mosr::InputError("lens: sample index out of range");
    const auto& prompt = split[static_cast<std::size_t>(index)].prompt;
    const auto lens = mosr::logit_lens(model, prompt, k);
    std::string csv = "layer,rank,token_id,token,logit\n";
    for (std::size_t l = 0; l < lens.layers.size(); ++l)
        for (std::size_t r = 0; r < lens.layers[l].size(); ++r) {
            const auto [id, logit] = lens.layers[l][r];
            csv += std::to_string(l) + "," + std::to_string(r + 1) + "," + std::to_string(id) + "," +
                   (vocab.word(id) == "," ? std::string("\",\"") : vocab.word(id)) + "," + csv_number(logit) + "\n";
        }
    finish_analysis("lens", out, csv,
                    {{"checkpoint", checkpoint ? checkpoint->string() : "base"}, {"corpus_dir", corpus_dir.string()},
                     {"split", split_name}, {"index", index}, {"k", k}},
                    clock);
    return 0;
}

int cmd_pca(const std::optional<fs::path>& checkpoint, const fs::path& corpus_dir, int layer, const fs::path& out) {
    Clock clock;
    const auto loaded = open_corpus(corpus_dir);
    const auto model = model_for(checkpoint, loaded);
    if (layer < 0 || layer >= model.config().n_layers) throw mosr::InputError("pca: layer out of range");
    std::vector<mosr::Vec> points;
    std::vector<std::pair<std::string, std::size_t>> ids;
    for (auto split : {mosr::Split::benign_eval, mosr::Split::malicious_eval, mosr::Split::or_eval}) {
        const auto prompts = mosr::prompts_of(loaded.corpus.split(split));
        const auto states = mosr::last_token_states(model, prompts);
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            points.push_back(states[static_cast<std::size_t>(layer)][i]);
            ids.emplace_back(mosr::to_string(split), i);
        }
    }
    const auto pca = mosr::pca_project(points, 2);
    std::string csv = "split,index,pc1,pc2\n";
    for (std::size_t i = 0; i < points.size(); ++i)
        csv += ids[i].first + "," + std::to_string(ids[i].second) + "," + csv_number(pca.projections[i](0)) + "," +
               csv_number(pca.projections[i](1)) + "\n";
    finish_analysis("pca", out, csv,
                    {{"checkpoint", checkpoint ? checkpoint->string() : "base"}, {"corpus_dir", corpus_dir.string()},
                     {"layer", layer}, {"explained_ratio", pca.explained_ratio}, {"rank", pca.rank}},
                    clock);
    return 0;
}

int cmd_distance(const std::optional<fs::path>& checkpoint, const fs::path& corpus_dir, const std::string& set_a,
                 const std::string& set_b, const fs::path& out) {
    Clock clock;
    const auto loaded = open_corpus(corpus_dir);
    const auto model = model_for(checkpoint, loaded);
    const auto a = mosr::prompts_of(loaded.corpus.split(mosr::split_from_string(set_a)));
    const auto b = mosr::prompts_of(loaded.corpus.split(mosr::split_from_string(set_b)));
    const auto dist = mosr::layerwise_cosine_distance(model, a, b);
    std::string csv = "layer,cosine_distance\n";
    for (auto [l, d] : dist) csv += std::to_string(l) + "," + csv_number(d) + "\n";
    finish_analysis("distance", out, csv,
                    {{"checkpoint", checkpoint ? checkpoint->string() : "base"}, {"corpus_dir", corpus_dir.string()},
                     {"set_a", set_a}, {"set_b", set_b}},
                    clock);
    return 0;
}

int cmd_kl(const std::optional<fs::path>& base_ckpt, const fs::path& model_ckpt, const fs::path& corpus_dir,
           const std::string& split_name, int n_prompts, int positions, const fs::path& out) {
    Clock clock;
    const auto loaded = open_corpus(corpus_dir);
    const auto base = model_for(base_ckpt, loaded);
    const auto model = model_for(model_ckpt, loaded);
    auto prompts = mosr::prompts_of(loaded.corpus.split(mosr::split_from_string(split_name)));
    if (n_prompts > 0 && static_cast<std::size_t>(n_prompts) < prompts.size()) prompts.resize(static_cast<std::size_t>(n_prompts));
    const auto profile = mosr::per_token_kl(base, model, prompts, positions, &base);
    std::string csv = "position,kl,prompts\n";
    for (std::size_t i = 0; i < profile.kl.size(); ++i)
        csv += std::to_string(i + 1) + "," + csv_number(profile.kl[i]) + "," + std::to_string(profile.counts[i]) + "\n";
    finish_analysis("kl", out, csv,
                    {{"base", base_ckpt ? base_ckpt->string() : "base"}, {"model", model_ckpt.string()},
                     {"corpus_dir", corpus_dir.string()}, {"split", split_name}, {"prompts", prompts.size()},
                     {"positions", positions}},
                    clock);
    return 0;
}

// ----------------------------------------------------------------- eval

int cmd_eval(const fs::path& responses, const std::optional<fs::path>& rule_path, const fs::path& report) {
    Clock clock;
    require_file(responses, "responses file");
    mosr::RefusalRule rule;
    if (rule_path) {
        require_file(*rule_path, "rule file");
        rule = mosr::RefusalRule::from_kv(mosr::KeyValueConfig::load(*rule_path));
    }
    std::vector<std::string> benign, malicious;
    std::istringstream in(mosr::read_text_file(responses));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw mosr::ParseError(std::string("invalid JSON: ") + e.what(), line_no);
        }
        if (!j.is_object() || !j.contains("label") || !j.contains("response") || !j.at("response").is_string())
            throw mosr::ParseError("expected {\"label\", \"response\"}", line_no);
        const auto label = mosr::label_from_string(j.at("label").get<std::string>());
        (label == mosr::Label::malicious ? malicious : benign).push_back(j.at("response").get<std::string>());
    }
    const auto metrics = mosr::evaluate(benign, malicious, rule);
    json doc = metrics.to_json();
    doc["rule"] = rule.to_kv().values();
    doc["manifest"] = base_manifest("eval", clock);
    doc["manifest"]["inputs"] = {{"responses", responses.string()},
                                 {"responses_sha256", mosr::sha256_file(responses)},
                                 {"rule", rule_path ? rule_path->string() : "default"}};
    doc["manifest"]["outputs"] = {report.string()};
    write_json(report, doc);
    std::cout << "over_refusal_rate=" << metrics.over_refusal_rate << " asr(proxy)=" << metrics.asr
              << " tradeoff=" << metrics.tradeoff << "\n";
    return 0;
}

// --------------------------------------------------------------- report

int variant_rank(const std::string& v) {
    if (v == "baseline") return 0;
    if (v == "weighting") return 1;
    if (v == "augmentation") return 2;
    if (v == "mosr") return 3;
    return 4;
}

int cmd_report(const std::vector<fs::path>& runs, const std::optional<fs::path>& out) {
    Clock clock;
    struct Row {
        std::string run, variant;
        json manifest;
        std::optional<mosr::MetricsReport> metrics;
    };
    std::vector<Row> rows;
    for (const auto& dir : runs) {
        const fs::path m = dir / "run_manifest.json";
        if (!fs::exists(m)) throw mosr::ValidationError("missing run manifest in " + dir.string());
        Row r{dir.string(), "", json::parse(mosr::read_text_file(m)), std::nullopt};
        r.variant = r.manifest.value("variant", "unknown");
        const fs::path metrics = dir / "metrics.json";
        if (fs::exists(metrics)) r.metrics = mosr::MetricsReport::from_json(json::parse(mosr::read_text_file(metrics)));
        rows.push_back(std::move(r));
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const Row& a, const Row& b) { return variant_rank(a.variant) < variant_rank(b.variant); });
    std::string csv = "run,variant,overlap_weighting,context_augmentation,asr_proxy,over_refusal_rate,tradeoff,"
                      "heldout_unsafe_cosine,heldout_benign_retain\n";
    for (const auto& r : rows) {
        const auto& cfg = r.manifest.at("config");
        csv += r.run + "," + r.variant + "," + cfg.value("overlap_weighting", "?") + "," +
               cfg.value("context_augmentation", "?") + ",";
        if (r.metrics) {
            csv += csv_number(r.metrics->asr) + "," + csv_number(r.metrics->over_refusal_rate) + "," +
                   csv_number(mosr::tradeoff_score(r.metrics->asr, r.metrics->over_refusal_rate)) + ",";
        } else {
            csv += ",,,";
        }
        if (r.manifest.contains("summary")) {
            const auto& s = r.manifest.at("summary");
            csv += csv_number(s.at("heldout_unsafe_cosine").get<double>()) + "," +
                   csv_number(s.at("heldout_benign_retain").get<double>());
        } else {
            csv += ",";
        }
        csv += "\n";
    }
    if (out) {
        mosr::write_text_file(*out, csv);
        json manifest = base_manifest("report", clock);
        json inputs = json::array();
        for (const auto& d : runs) inputs.push_back(d.string());
        manifest["inputs"] = inputs;
        manifest["outputs"] = {out->string()};
        write_json(sidecar_manifest(*out), manifest);
    } else {
        std::cout << csv;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Over-refusal-aware representation alignment toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    std::string config, out, corpus, resume, checkpoint, responses, rule, report, kinds = "both", split = "malicious_eval";
    std::string set_a = "benign_eval", set_b = "or_eval", base, model;
    int until = -1, max_tokens = 24, index = 0, k = 5, layer = -1, positions = 20, n_prompts = 50;
    std::uint64_t seed = 0;
    std::vector<std::string> run_dirs;

    auto* synth = app.add_subcommand("synth", "Generate the synthetic corpus");
    synth->add_option("--config", config, "Corpus config (key = value)")->required();
    synth->add_option("--out", out, "Output directory")->required();

    auto* train = app.add_subcommand("train", "Train adapters");
    train->add_option("--config", config, "Training config (key = value)")->required();
    train->add_option("--corpus", corpus, "Corpus directory")->required();
    train->add_option("--out", out, "Run directory")->required();
    train->add_option("--resume", resume, "Checkpoint to resume from");
    train->add_option("--until", until, "Stop after this step");

    auto* gen = app.add_subcommand("generate", "Greedy responses for the evaluation prompts");
    gen->add_option("--checkpoint", checkpoint, "Model checkpoint (default: base model)");
    gen->add_option("--corpus", corpus, "Corpus directory")->required();
    gen->add_option("--out", out, "Responses file (JSONL)")->required();
    gen->add_option("--max-tokens", max_tokens, "Tokens per response");

    auto* analyze = app.add_subcommand("analyze", "Representation diagnostics");
    analyze->require_subcommand(1);
    auto* probe = analyze->add_subcommand("probe", "Layer-wise safety probes");
    auto* lens = analyze->add_subcommand("lens", "Logit lens");
    auto* pca = analyze->add_subcommand("pca", "PCA of last-token states");
    auto* distance = analyze->add_subcommand("distance", "Layer-wise cosine distance");
    auto* kl = analyze->add_subcommand("kl", "Per-token KL divergence");
    for (auto* sub : {probe, lens, pca, distance}) {
        sub->add_option("--checkpoint", checkpoint, "Model checkpoint (default: base model)");
        sub->add_option("--corpus", corpus, "Corpus directory")->required();
        sub->add_option("--out", out, "Output CSV")->required();
    }
    probe->add_option("--kind", kinds, "linear, feed_forward or both");
    probe->add_option("--seed", seed, "Split seed");
    lens->add_option("--split", split, "Split name");
    lens->add_option("--index", index, "Sample index");
    lens->add_option("-k,--top", k, "Tokens per layer");
    pca->add_option("--layer", layer, "Layer (default: top)");
    distance->add_option("--set-a", set_a, "First split");
    distance->add_option("--set-b", set_b, "Second split");
    kl->add_option("--base", base, "Reference checkpoint (default: base model)");
    kl->add_option("--model", model, "Compared checkpoint")->required();
    kl->add_option("--corpus", corpus, "Corpus directory")->required();
    kl->add_option("--out", out, "Output CSV")->required();
    kl->add_option("--split", split, "Prompt split");
    kl->add_option("--prompts", n_prompts, "Number of prompts (0 = all)");
    kl->add_option("--positions", positions, "Response positions");

    auto* eval = app.add_subcommand("eval", "Refusal metrics");
    eval->add_option("--responses", responses, "Responses (JSONL with label, response)")->required();
    eval->add_option("--rule", rule, "Refusal rule (key = value)");
    eval->add_option("--report", report, "Report JSON")->required();

    auto* rep = app.add_subcommand("report", "Compare runs");
    rep->add_option("run_dirs", run_dirs, "Run directories")->required();
    rep->add_option("--out", out, "Output CSV (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    auto opt_path = [](const std::string& s) { return s.empty() ? std::optional<fs::path>{} : std::optional<fs::path>{s}; };
    try {
        if (*synth) return cmd_synth(config, out);
        if (*train)
            return cmd_train(config, corpus, out, opt_path(resume), until >= 0 ? std::optional<int>(until) : std::nullopt);
        if (*gen) return cmd_generate(opt_path(checkpoint), corpus, out, max_tokens);
        if (*probe) return cmd_probe(opt_path(checkpoint), corpus, kinds, seed, out);
        if (*lens) return cmd_lens(opt_path(checkpoint), corpus, split, index, k, out);
        if (*pca) {
            const auto loaded_layers = layer;
            return cmd_pca(opt_path(checkpoint), corpus,
                           loaded_layers >= 0 ? loaded_layers : open_corpus(corpus).model_config.n_layers - 1, out);
        }
        if (*distance) return cmd_distance(opt_path(checkpoint), corpus, set_a, set_b, out);
        if (*kl) return cmd_kl(opt_path(base), model, corpus, split, n_prompts, positions, out);
        if (*eval) return cmd_eval(responses, opt_path(rule), report);
        if (*rep) return cmd_report({run_dirs.begin(), run_dirs.end()}, opt_path(out));
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const mosr::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const mosr::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const json::exception& e) {
        std::cerr << "error: malformed JSON document: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
