// SPDX-License-Identifier: Apache-2.0
#include "mosr/data.hpp"

#include "mosr/checkpoint.hpp"
#include "mosr/repr.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace mosr {

namespace {

const std::vector<std::string>& refusal_words() {
    static const std::vector<std::string> w = {"i",   "am",          "sorry", ",",    "apologize", "not",
                                               "able", "to",         "it",    "is",   "appropriate", "cannot",
                                               "help", "with",       "that",  "unfortunately", "."};
    return w;
}

const std::vector<std::string>& compliance_words() {
    static const std::vector<std::string> w = {"sure", "here", "glad", "step", "guide", "happy", "of", "course"};
    return w;
}

const std::vector<std::string>& refusal_templates() {
    static const std::vector<std::string> t = {
        "i am sorry , i cannot help with that .",
        "i apologize , it is not appropriate to help with that .",
        "i am not able to help with that .",
        "unfortunately , i am not able to help with that .",
    };
    return t;
}

constexpr const char* kComplianceOpener = "sure , here is";

std::string canonical_line(const ChatSample& s) { return to_json(s).dump(); }

}  // namespace

const char* to_string(Label label) {
    switch (label) {
        case Label::benign: return "benign";
        case Label::malicious: return "malicious";
        case Label::over_refusal: return "over_refusal";
    }
    return "?";
}

const char* to_string(ResponseKind kind) {
    switch (kind) {
        case ResponseKind::normal: return "normal";
        case ResponseKind::refusal: return "refusal";
        case ResponseKind::harmful: return "harmful";
    }
    return "?";
}

Label label_from_string(const std::string& text) {
    if (text == "benign") return Label::benign;
    if (text == "malicious") return Label::malicious;
    if (text == "over_refusal") return Label::over_refusal;
    throw InputError("unknown label '" + text + "'");
}

ResponseKind response_kind_from_string(const std::string& text) {
    if (text == "normal") return ResponseKind::normal;
    if (text == "refusal") return ResponseKind::refusal;
    if (text == "harmful") return ResponseKind::harmful;
    throw InputError("unknown response_kind '" + text + "'");
}

std::vector<int> ChatSample::tokens() const {
    std::vector<int> out = prompt;
    out.insert(out.end(), response.begin(), response.end());
    return out;
}

std::vector<int> AugmentedSample::tokens() const {
    std::vector<int> out = prompt;
    out.insert(out.end(), harmful_prefix.begin(), harmful_prefix.end());
    out.insert(out.end(), refusal.begin(), refusal.end());
    return out;
}

AugmentedSample augment_context(const ChatSample& unsafe_sample, std::span<const int> refusal_response,
                                int prefix_len) {
    if (unsafe_sample.response_kind != ResponseKind::harmful)
        throw InputError("augment_context: sample does not carry a harmful response");
    if (prefix_len < 0) throw InputError("augment_context: prefix length must be >= 0");
    if (static_cast<std::size_t>(prefix_len) > unsafe_sample.response.size())
        throw InputError("augment_context: prefix length " + std::to_string(prefix_len) +
                         " exceeds harmful response length " + std::to_string(unsafe_sample.response.size()));
    AugmentedSample out;
    out.prompt = unsafe_sample.prompt;
    out.harmful_prefix.assign(unsafe_sample.response.begin(), unsafe_sample.response.begin() + prefix_len);
    out.refusal.assign(refusal_response.begin(), refusal_response.end());
    return out;
}

const char* to_string(Split split) {
    switch (split) {
        case Split::unsafe: return "unsafe";
        case Split::safe: return "safe";
        case Split::over_refusal: return "over_refusal";
        case Split::benign_eval: return "benign_eval";
        case Split::malicious_eval: return "malicious_eval";
        case Split::or_eval: return "or_eval";
    }
    return "?";
}

Split split_from_string(const std::string& text) {
    for (Split s : kAllSplits)
        if (text == to_string(s)) return s;
    throw InputError("unknown split '" + text + "'");
}

std::string split_file_name(Split split) { return std::string(to_string(split)) + ".jsonl"; }

void validate_sample(const ChatSample& s, Split split) {
    if (s.prompt.empty()) throw ValidationError("empty prompt");
    auto fail = [&](const std::string& why) {
        throw ValidationError(std::string("record (label=") + to_string(s.label) + ", response_kind=" +
                              to_string(s.response_kind) + ") not allowed in split " + to_string(split) + ": " + why);
    };
    switch (split) {
        case Split::unsafe:
            if (s.label != Label::malicious || s.response_kind != ResponseKind::harmful)
                fail("unsafe set holds malicious prompts with harmful responses");
            break;
        case Split::safe:
            if (s.response_kind == ResponseKind::harmful) fail("safe set never holds harmful responses");
            if (s.response_kind == ResponseKind::normal && s.label != Label::benign)
                fail("normal responses in the safe set must be benign conversations");
            break;
        case Split::over_refusal:
        case Split::or_eval:
            if (s.label != Label::over_refusal) fail("expected over_refusal label");
            break;
        case Split::benign_eval:
            if (s.label != Label::benign) fail("expected benign label");
            break;
        case Split::malicious_eval:
            if (s.label != Label::malicious) fail("expected malicious label");
            break;
    }
}

Vocabulary Vocabulary::synthetic(int vocab_size) {
    const int fixed = 3 + static_cast<int>(refusal_words().size() + compliance_words().size());
    if (vocab_size < fixed + 5 * 4)
        throw InputError("synthetic vocabulary needs at least " + std::to_string(fixed + 20) + " tokens");
    Vocabulary v;
    v.words_ = {"<s>", "[/q]", "</s>"};
    for (const auto& w : refusal_words()) v.words_.push_back(w);
    for (const auto& w : compliance_words()) v.words_.push_back(w);
    const int pool = (vocab_size - fixed) / 5;
    const int filler = vocab_size - fixed - 4 * pool;
    auto add_pool = [&](const char* prefix, int count) {
        Pool p{static_cast<int>(v.words_.size()), count};
        for (int i = 0; i < count; ++i) v.words_.push_back(prefix + std::to_string(i));
        return p;
    };
    v.filler = add_pool("f", filler);
    v.benign_topic = add_pool("b", pool);
    v.malicious_topic = add_pool("m", pool);
    v.harmful = add_pool("h", pool);
    v.normal = add_pool("n", pool);
    for (int i = 0; i < static_cast<int>(v.words_.size()); ++i) v.index_[v.words_[static_cast<std::size_t>(i)]] = i;
    return v;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& w) const {
    const auto it = index_.find(w);
    if (it == index_.end()) throw InputError("word '" + w + "' not in vocabulary");
    return it->second;
}

std::string Vocabulary::decode(std::span<const int> tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += word(tokens[i]);
    }
    return out;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
    std::istringstream in(text);
    std::vector<int> out;
    std::string w;
    while (in >> w) out.push_back(id(w));
    return out;
}

nlohmann::json to_json(const ChatSample& s) {
    nlohmann::json j;
    j["prompt"] = s.prompt;
    j["response"] = s.response;
    j["label"] = to_string(s.label);
    j["response_kind"] = to_string(s.response_kind);
    return j;
}

ChatSample sample_from_json(const nlohmann::json& j, const Vocabulary* vocab) {
    if (!j.is_object()) throw InputError("record is not an object");
    for (const char* key : {"prompt", "response", "label", "response_kind"})
        if (!j.contains(key)) throw InputError(std::string("missing field '") + key + "'");
    for (const auto& [key, _] : j.items())
        if (key != "prompt" && key != "response" && key != "label" && key != "response_kind")
            throw InputError("unexpected field '" + key + "'");
    auto tokens = [&](const nlohmann::json& v, const char* field) -> std::vector<int> {
        if (v.is_string()) {
            if (vocab == nullptr) throw InputError(std::string("field '") + field + "' is text but no vocabulary was given");
            return vocab->encode(v.get<std::string>());
        }
        if (!v.is_array()) throw InputError(std::string("field '") + field + "' must be a string or an int array");
        std::vector<int> out;
        for (const auto& x : v) {
            if (!x.is_number_integer()) throw InputError(std::string("field '") + field + "' holds a non-integer");
            out.push_back(x.get<int>());
        }
        return out;
    };
    ChatSample s;
    s.prompt = tokens(j["prompt"], "prompt");
    s.response = tokens(j["response"], "response");
    if (!j["label"].is_string()) throw InputError("field 'label' must be a string");
    if (!j["response_kind"].is_string()) throw InputError("field 'response_kind' must be a string");
    s.label = label_from_string(j["label"].get<std::string>());
    s.response_kind = response_kind_from_string(j["response_kind"].get<std::string>());
    return s;
}

std::string dataset_to_jsonl(std::span<const ChatSample> samples) {
    std::string out;
    for (const auto& s : samples) out += canonical_line(s) + "\n";
    return out;
}

void save_dataset(const std::filesystem::path& path, std::span<const ChatSample> samples) {
    write_text_file(path, dataset_to_jsonl(samples));
}

std::vector<ChatSample> parse_dataset(const std::string& text, Split expected_split, const Vocabulary* vocab) {
    std::vector<ChatSample> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ChatSample s;
        try {
            s = sample_from_json(nlohmann::json::parse(line), vocab);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), lineno);
        } catch (const InputError& e) {
            throw ParseError(e.what(), lineno);
        }
        try {
            validate_sample(s, expected_split);
        } catch (const ValidationError& e) {
            throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<ChatSample> load_dataset(const std::filesystem::path& path, Split expected_split,
                                     const Vocabulary* vocab) {
    return parse_dataset(read_text_file(path), expected_split, vocab);
}

void CorpusConfig::validate() const {
    for (int n : {n_unsafe, n_safe, n_over_refusal, n_benign_eval, n_malicious_eval, n_or_eval})
        if (n < 1) throw InputError("corpus: every split size must be >= 1");
    if (prompt_min_tokens < 1 || prompt_max_tokens < prompt_min_tokens)
        throw InputError("corpus: need 1 <= prompt_min_tokens <= prompt_max_tokens");
    if (harmful_response_tokens < 5 || normal_response_tokens < 5)
        throw InputError("corpus: response lengths must be >= 5");
    if (!(topic_density > 0.0 && topic_density <= 1.0)) throw InputError("corpus: topic_density must be in (0, 1]");
    if (topic_vocab_tokens < 0) throw InputError("corpus: topic_vocab_tokens must be >= 0");
    if (response_vocab_tokens < 0) throw InputError("corpus: response_vocab_tokens must be >= 0");
    if (!(spread >= 0.0 && spread < 1.0)) throw InputError("corpus: spread must be in [0, 1)");
    if (!(or_interpolation > 0.0 && or_interpolation < 1.0))
        throw InputError("corpus: or_interpolation must be in (0, 1)");
    if (!(retain_benign_ratio >= 0.0)) throw InputError("corpus: retain_benign_ratio must be >= 0");
    if (verify_layers.empty()) throw InputError("corpus: verify_layers must be non-empty");
    if (max_retries < 1) throw InputError("corpus: max_retries must be >= 1");
}

std::vector<std::string> CorpusConfig::known_keys() {
    return {"n_unsafe",         "n_safe",           "n_over_refusal",          "n_benign_eval",
            "n_malicious_eval", "n_or_eval",        "prompt_min_tokens",       "prompt_max_tokens",
            "harmful_response_tokens", "normal_response_tokens", "topic_density", "topic_vocab_tokens", "response_vocab_tokens", "spread",
            "or_interpolation", "retain_benign_ratio", "verify_layers",         "projection_slack",
            "min_centroid_accuracy", "max_retries",  "seed"};
}

KeyValueConfig CorpusConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("n_unsafe", std::to_string(n_unsafe));
    kv.set("n_safe", std::to_string(n_safe));
    kv.set("n_over_refusal", std::to_string(n_over_refusal));
    kv.set("n_benign_eval", std::to_string(n_benign_eval));
    kv.set("n_malicious_eval", std::to_string(n_malicious_eval));
    kv.set("n_or_eval", std::to_string(n_or_eval));
    kv.set("prompt_min_tokens", std::to_string(prompt_min_tokens));
    kv.set("prompt_max_tokens", std::to_string(prompt_max_tokens));
    kv.set("harmful_response_tokens", std::to_string(harmful_response_tokens));
    kv.set("normal_response_tokens", std::to_string(normal_response_tokens));
    kv.set("topic_density", format_double(topic_density));
    kv.set("topic_vocab_tokens", std::to_string(topic_vocab_tokens));
    kv.set("response_vocab_tokens", std::to_string(response_vocab_tokens));
    kv.set("spread", format_double(spread));
    kv.set("or_interpolation", format_double(or_interpolation));
    kv.set("retain_benign_ratio", format_double(retain_benign_ratio));
    kv.set("verify_layers", join_ints(verify_layers));
    kv.set("projection_slack", format_double(projection_slack));
    kv.set("min_centroid_accuracy", format_double(min_centroid_accuracy));
    kv.set("max_retries", std::to_string(max_retries));
    kv.set("seed", std::to_string(seed));
    return kv;
}

CorpusConfig CorpusConfig::from_kv(const KeyValueConfig& kv) {
    const auto unknown = kv.unknown_keys(known_keys());
    if (!unknown.empty()) throw ValidationError("corpus config: unknown key '" + unknown.front() + "'");
    CorpusConfig c;
    auto geti = [&](const char* k, int d) { return static_cast<int>(kv.get_int(k, d)); };
    c.n_unsafe = geti("n_unsafe", c.n_unsafe);
    c.n_safe = geti("n_safe", c.n_safe);
    c.n_over_refusal = geti("n_over_refusal", c.n_over_refusal);
    c.n_benign_eval = geti("n_benign_eval", c.n_benign_eval);
    c.n_malicious_eval = geti("n_malicious_eval", c.n_malicious_eval);
    c.n_or_eval = geti("n_or_eval", c.n_or_eval);
    c.prompt_min_tokens = geti("prompt_min_tokens", c.prompt_min_tokens);
    c.prompt_max_tokens = geti("prompt_max_tokens", c.prompt_max_tokens);
    c.harmful_response_tokens = geti("harmful_response_tokens", c.harmful_response_tokens);
    c.normal_response_tokens = geti("normal_response_tokens", c.normal_response_tokens);
    c.topic_density = kv.get_double("topic_density", c.topic_density);
    c.topic_vocab_tokens = geti("topic_vocab_tokens", c.topic_vocab_tokens);
    c.response_vocab_tokens = geti("response_vocab_tokens", c.response_vocab_tokens);
    c.spread = kv.get_double("spread", c.spread);
    c.or_interpolation = kv.get_double("or_interpolation", c.or_interpolation);
    c.retain_benign_ratio = kv.get_double("retain_benign_ratio", c.retain_benign_ratio);
    if (kv.has("verify_layers")) c.verify_layers = parse_int_list(kv.get("verify_layers"));
    c.projection_slack = kv.get_double("projection_slack", c.projection_slack);
    c.min_centroid_accuracy = kv.get_double("min_centroid_accuracy", c.min_centroid_accuracy);
    c.max_retries = geti("max_retries", c.max_retries);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
    c.validate();
    return c;
}

std::vector<ChatSample>& Corpus::split(Split s) {
    return const_cast<std::vector<ChatSample>&>(static_cast<const Corpus&>(*this).split(s));
}

const std::vector<ChatSample>& Corpus::split(Split s) const {
    switch (s) {
        case Split::unsafe: return unsafe;
        case Split::safe: return safe;
        case Split::over_refusal: return over_refusal;
        case Split::benign_eval: return benign_eval;
        case Split::malicious_eval: return malicious_eval;
        case Split::or_eval: return or_eval;
    }
    throw InputError("bad split");
}

bool Corpus::operator==(const Corpus& o) const {
    for (Split s : kAllSplits)
        if (split(s) != o.split(s)) return false;
    return true;
}

std::vector<std::vector<int>> prompts_of(std::span<const ChatSample> samples) {
    std::vector<std::vector<int>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.prompt);
    return out;
}

std::vector<std::vector<int>> sequences_of(std::span<const ChatSample> samples) {
    std::vector<std::vector<int>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.tokens());
    return out;
}

GeometryReport measure_geometry(const Corpus& corpus, const TransformerModel& frozen_model,
                                std::span<const int> layer_ids) {
    auto pooled = [&](const std::vector<ChatSample>& set) {
        std::vector<Vec> out;
        for (const auto& s : set) out.push_back(pool(gather_representation(frozen_model, s.prompt, layer_ids)));
        return out;
    };
    auto mean = [](const std::vector<Vec>& vs) {
        Vec m = Vec::Zero(vs.front().size());
        for (const auto& v : vs) m += v;
        return Vec(m / static_cast<double>(vs.size()));
    };
    const auto benign = pooled(corpus.benign_eval);
    const auto malicious = pooled(corpus.malicious_eval);
    const auto over = pooled(corpus.or_eval);
    const Vec b = mean(benign), m = mean(malicious), o = mean(over);

    GeometryReport g;
    g.cos_or_benign = cosine_sim(o, b);
    g.cos_or_malicious = cosine_sim(o, m);
    g.cos_benign_malicious = cosine_sim(b, m);
    const Vec axis = m - b;
    g.or_projection = (o - b).dot(axis) / axis.squaredNorm();
    std::size_t correct = 0;
    for (const auto& v : benign) correct += (v - b).squaredNorm() < (v - m).squaredNorm();
    for (const auto& v : malicious) correct += (v - m).squaredNorm() < (v - b).squaredNorm();
    g.centroid_accuracy = static_cast<double>(correct) / static_cast<double>(benign.size() + malicious.size());
    return g;
}

namespace {

class CorpusSampler {
public:
    CorpusSampler(const CorpusConfig& cfg, const Vocabulary& vocab, std::uint64_t seed)
        : cfg_(cfg), vocab_(vocab), rng_(seed) {}

    // Malicious-topic fraction per cluster.
    double benign_mix() { return rng_.uniform(0.0, cfg_.spread); }
    double malicious_mix() { return rng_.uniform(1.0 - cfg_.spread, 1.0); }
    double over_refusal_mix() {
        const double half = cfg_.spread / 2.0;
        return std::clamp(rng_.uniform(cfg_.or_interpolation - half, cfg_.or_interpolation + half), 0.0, 1.0);
    }

    std::vector<int> prompt(double malicious_fraction) {
        const int len = cfg_.prompt_min_tokens +
                        static_cast<int>(rng_.below(static_cast<std::size_t>(cfg_.prompt_max_tokens - cfg_.prompt_min_tokens + 1)));
        std::vector<int> p{vocab_.bos()};
        for (int i = 0; i < len; ++i) {
            if (rng_.uniform() < cfg_.topic_density)
                p.push_back(draw(topic(rng_.uniform() < malicious_fraction ? vocab_.malicious_topic : vocab_.benign_topic)));
            else
                p.push_back(draw(vocab_.filler));
        }
        p.push_back(vocab_.end_of_prompt());
        return p;
    }

    std::vector<int> harmful_response() { return compliant(vocab_.harmful, cfg_.harmful_response_tokens); }
    std::vector<int> normal_response() { return compliant(vocab_.normal, cfg_.normal_response_tokens); }

    std::vector<int> refusal() {
        const auto& t = refusal_templates();
        return vocab_.encode(t[rng_.below(t.size())]);
    }

private:
    static Vocabulary::Pool head(Vocabulary::Pool pool, int limit) {
        if (limit > 0) pool.count = std::min(pool.count, limit);
        return pool;
    }
    Vocabulary::Pool topic(const Vocabulary::Pool& pool) const { return head(pool, cfg_.topic_vocab_tokens); }

    int draw(const Vocabulary::Pool& pool) {
        return pool.first + static_cast<int>(rng_.below(static_cast<std::size_t>(pool.count)));
    }

    std::vector<int> compliant(const Vocabulary::Pool& pool, int total) {
        std::vector<int> r = vocab_.encode(kComplianceOpener);
        while (static_cast<int>(r.size()) < total) r.push_back(rng_.uniform() < 0.8 ? draw(head(pool, cfg_.response_vocab_tokens)) : draw(vocab_.filler));
        return r;
    }

    const CorpusConfig& cfg_;
    const Vocabulary& vocab_;
    Rng rng_;
};

Corpus draw_corpus(const CorpusConfig& cfg, const Vocabulary& vocab, std::uint64_t seed) {
    CorpusSampler s(cfg, vocab, seed);
    std::set<std::vector<int>> seen;
    auto fresh = [&](auto mix) {
        for (;;) {
            auto p = s.prompt(mix());
            if (seen.insert(p).second) return p;
        }
    };
    auto benign_mix = [&] { return s.benign_mix(); };
    auto malicious_mix = [&] { return s.malicious_mix(); };
    auto or_mix = [&] { return s.over_refusal_mix(); };

    Corpus c;
    for (int i = 0; i < cfg.n_unsafe; ++i)
        c.unsafe.push_back({fresh(malicious_mix), s.harmful_response(), Label::malicious, ResponseKind::harmful});

    // Refusal pairs reuse unsafe prompts so every one has a harmful response to
    // draw a context prefix from.
    const int n_benign_retain =
        static_cast<int>(std::lround(cfg.n_safe * cfg.retain_benign_ratio / (1.0 + cfg.retain_benign_ratio)));
    const int n_refusal = cfg.n_safe - n_benign_retain;
    for (int i = 0; i < n_refusal; ++i) {
        const auto& src = c.unsafe[static_cast<std::size_t>(i) % c.unsafe.size()];
        c.safe.push_back({src.prompt, s.refusal(), Label::malicious, ResponseKind::refusal});
    }
    for (int i = 0; i < n_benign_retain; ++i)
        c.safe.push_back({fresh(benign_mix), s.normal_response(), Label::benign, ResponseKind::normal});

    for (int i = 0; i < cfg.n_over_refusal; ++i)
        c.over_refusal.push_back({fresh(or_mix), s.refusal(), Label::over_refusal, ResponseKind::refusal});
    for (int i = 0; i < cfg.n_benign_eval; ++i)
        c.benign_eval.push_back({fresh(benign_mix), s.normal_response(), Label::benign, ResponseKind::normal});
    for (int i = 0; i < cfg.n_malicious_eval; ++i)
        c.malicious_eval.push_back({fresh(malicious_mix), s.harmful_response(), Label::malicious, ResponseKind::harmful});
    for (int i = 0; i < cfg.n_or_eval; ++i)
        c.or_eval.push_back({fresh(or_mix), s.refusal(), Label::over_refusal, ResponseKind::refusal});
    return c;
}

}  // namespace

Corpus synth_corpus(const CorpusConfig& config, const ModelConfig& model_config) {
    config.validate();
    model_config.validate();
    const Vocabulary vocab = Vocabulary::synthetic(model_config.vocab_size);
    const int longest = config.prompt_max_tokens + 2 + config.harmful_response_tokens;
    if (longest > model_config.max_seq_len)
        throw InputError("corpus: prompt + harmful response (" + std::to_string(longest) +
                         " tokens) exceeds max_seq_len");
    const TransformerModel frozen = clone_frozen(TransformerModel(model_config));

    std::string last_failure;
    for (int attempt = 0; attempt < config.max_retries; ++attempt) {
        Corpus c = draw_corpus(config, vocab, config.seed + 0x100000001b3ULL * static_cast<std::uint64_t>(attempt));
        GeometryReport g = measure_geometry(c, frozen, config.verify_layers);
        g.attempts = attempt + 1;
        const bool between = g.or_projection > 0.0 && g.or_projection < 1.0 &&
                             std::abs(g.or_projection - config.or_interpolation) <= config.projection_slack;
        const bool separable = g.centroid_accuracy >= config.min_centroid_accuracy;
        if (between && separable) {
            c.geometry = g;
            return c;
        }
        std::ostringstream why;
        why << "attempt " << attempt + 1 << ": or_projection=" << g.or_projection
            << " centroid_accuracy=" << g.centroid_accuracy;
        last_failure = why.str();
    }
    throw GenerationError("corpus geometry verification failed after " + std::to_string(config.max_retries) +
                          " attempts (" + last_failure + ")");
}

std::string corpus_hash(const Corpus& corpus) {
    std::string text;
    for (Split s : kAllSplits) text += std::string(to_string(s)) + "\n" + dataset_to_jsonl(corpus.split(s));
    return sha256_hex(text);
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus, const CorpusConfig& config,
                 const ModelConfig& model_config) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["seed"] = config.seed;
    manifest["config"] = config.to_kv().values();
    manifest["model_config"] = to_json(model_config);
    for (Split s : kAllSplits) {
        const std::string text = dataset_to_jsonl(corpus.split(s));
        write_text_file(dir / split_file_name(s), text);
        manifest["splits"][to_string(s)] = {
            {"file", split_file_name(s)}, {"count", corpus.split(s).size()}, {"sha256", sha256_hex(text)}};
    }
    const auto& g = corpus.geometry;
    manifest["geometry"] = {{"cos_or_benign", g.cos_or_benign},
                            {"cos_or_malicious", g.cos_or_malicious},
                            {"cos_benign_malicious", g.cos_benign_malicious},
                            {"or_projection", g.or_projection},
                            {"centroid_accuracy", g.centroid_accuracy},
                            {"attempts", g.attempts}};
    manifest["corpus_hash"] = corpus_hash(corpus);
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedCorpus load_corpus(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw ValidationError("corpus manifest missing: " + manifest_path.string());
    LoadedCorpus out;
    try {
        out.manifest = nlohmann::json::parse(read_text_file(manifest_path));
        KeyValueConfig kv;
        for (const auto& [k, v] : out.manifest.at("config").items()) kv.set(k, v.get<std::string>());
        out.config = CorpusConfig::from_kv(kv);
        out.model_config = model_config_from_json(out.manifest.at("model_config"));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("corrupt corpus manifest: ") + e.what());
    }
    for (Split s : kAllSplits) {
        const auto& entry = out.manifest.at("splits").at(to_string(s));
        const auto path = dir / entry.at("file").get<std::string>();
        const std::string text = read_text_file(path);
        if (sha256_hex(text) != entry.at("sha256").get<std::string>())
            throw ValidationError("split " + std::string(to_string(s)) + " does not match its manifest hash");
        out.corpus.split(s) = parse_dataset(text, s);
        if (out.corpus.split(s).size() != entry.at("count").get<std::size_t>())
            throw ValidationError("split " + std::string(to_string(s)) + " record count differs from manifest");
    }
    const auto& g = out.manifest.at("geometry");
    out.corpus.geometry = {g.at("cos_or_benign").get<double>(),    g.at("cos_or_malicious").get<double>(),
                           g.at("cos_benign_malicious").get<double>(), g.at("or_projection").get<double>(),
                           g.at("centroid_accuracy").get<double>(), g.at("attempts").get<int>()};
    return out;
}

}  // namespace mosr
