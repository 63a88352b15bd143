// SPDX-License-Identifier: Apache-2.0
//
// Dataset records, context augmentation, line-delimited IO and the synthetic
// three-cluster corpus (benign / malicious / over-refusal boundary).
#pragma once

#include "mosr/io.hpp"
#include "mosr/tinylm.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mosr {

enum class Label { benign, malicious, over_refusal };
enum class ResponseKind { normal, refusal, harmful };

const char* to_string(Label label);
const char* to_string(ResponseKind kind);
Label label_from_string(const std::string& text);
ResponseKind response_kind_from_string(const std::string& text);

struct ChatSample {
    std::vector<int> prompt;
    std::vector<int> response;
    Label label = Label::benign;
    ResponseKind response_kind = ResponseKind::normal;

    std::vector<int> tokens() const;  // prompt followed by response
    bool operator==(const ChatSample&) const = default;
};

struct AugmentedSample {
    std::vector<int> prompt;
    std::vector<int> harmful_prefix;
    std::vector<int> refusal;

    std::vector<int> tokens() const;  // prompt, prefix, refusal
};

// Builds (q, first L tokens of the harmful response, r). L = 0 gives the plain
// (q, r) retain pair.
AugmentedSample augment_context(const ChatSample& unsafe_sample, std::span<const int> refusal_response,
                                int prefix_len);

// The six corpus splits.
enum class Split { unsafe, safe, over_refusal, benign_eval, malicious_eval, or_eval };
inline constexpr Split kAllSplits[] = {Split::unsafe,      Split::safe,           Split::over_refusal,
                                       Split::benign_eval, Split::malicious_eval, Split::or_eval};
const char* to_string(Split split);
Split split_from_string(const std::string& text);
std::string split_file_name(Split split);

// Throws ValidationError when `sample` may not appear in `split`.
void validate_sample(const ChatSample& sample, Split split);

// Word-level vocabulary for the synthetic language. Token ids are laid out as
// specials, refusal words, compliance words, then five equal pools (filler,
// benign topic, malicious topic, harmful response, normal response).
class Vocabulary {
public:
    static Vocabulary synthetic(int vocab_size);

    int size() const { return static_cast<int>(words_.size()); }
    const std::string& word(int id) const;
    int id(const std::string& word) const;

    std::string decode(std::span<const int> tokens) const;
    std::vector<int> encode(const std::string& text) const;

    struct Pool {
        int first = 0;
        int count = 0;
    };
    int bos() const { return 0; }
    int end_of_prompt() const { return 1; }
    int eos() const { return 2; }
    Pool filler, benign_topic, malicious_topic, harmful, normal;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

nlohmann::json to_json(const ChatSample& sample);
// `vocab` is needed only when prompt/response are given as text.
ChatSample sample_from_json(const nlohmann::json& j, const Vocabulary* vocab = nullptr);

std::string dataset_to_jsonl(std::span<const ChatSample> samples);
void save_dataset(const std::filesystem::path& path, std::span<const ChatSample> samples);
// Parse errors carry the 1-based line number; invariant violations are ValidationError.
std::vector<ChatSample> load_dataset(const std::filesystem::path& path, Split expected_split,
                                     const Vocabulary* vocab = nullptr);
std::vector<ChatSample> parse_dataset(const std::string& text, Split expected_split,
                                      const Vocabulary* vocab = nullptr);

struct CorpusConfig {
    int n_unsafe = 200;
    int n_safe = 200;
    int n_over_refusal = 200;
    int n_benign_eval = 200;
    int n_malicious_eval = 200;
    int n_or_eval = 200;

    int prompt_min_tokens = 5;
    int prompt_max_tokens = 7;
    int harmful_response_tokens = 54;
    int normal_response_tokens = 16;

    // Fraction of prompt content tokens drawn from a topic pool (the rest are
    // shared fillers); the larger, the further apart the cluster centers.
    double topic_density = 1.0;
    // Distinct tokens drawn from each topic pool (0 = the whole pool).
    int topic_vocab_tokens = 8;
    // Distinct tokens drawn from each response pool (0 = the whole pool).
    int response_vocab_tokens = 8;
    // Per-sample jitter of the malicious-topic fraction.
    double spread = 0.2;
    // Malicious-topic fraction of over-refusal prompts, in (0, 1).
    double or_interpolation = 0.5;
    // Benign conversations per refusal pair in the safe split.
    double retain_benign_ratio = 1.0;

    std::vector<int> verify_layers = {2, 3};
    double projection_slack = 0.25;
    double min_centroid_accuracy = 0.95;
    int max_retries = 5;
    std::uint64_t seed = 7;

    void validate() const;
    KeyValueConfig to_kv() const;
    static CorpusConfig from_kv(const KeyValueConfig& kv);
    static std::vector<std::string> known_keys();
};

// Post-hoc cluster geometry of the frozen model's pooled prompt embeddings.
struct GeometryReport {
    double cos_or_benign = 0.0;
    double cos_or_malicious = 0.0;
    double cos_benign_malicious = 0.0;
    // Position of the over-refusal centroid along benign -> malicious (0 = benign).
    double or_projection = 0.0;
    // Nearest-centroid accuracy separating benign_eval from malicious_eval.
    double centroid_accuracy = 0.0;
    int attempts = 0;
};

struct Corpus {
    std::vector<ChatSample> unsafe;
    std::vector<ChatSample> safe;
    std::vector<ChatSample> over_refusal;
    std::vector<ChatSample> benign_eval;
    std::vector<ChatSample> malicious_eval;
    std::vector<ChatSample> or_eval;
    GeometryReport geometry;

    std::vector<ChatSample>& split(Split s);
    const std::vector<ChatSample>& split(Split s) const;
    bool operator==(const Corpus& o) const;
};

GeometryReport measure_geometry(const Corpus& corpus, const TransformerModel& frozen_model,
                                std::span<const int> layer_ids);

Corpus synth_corpus(const CorpusConfig& config, const ModelConfig& model_config);

std::vector<std::vector<int>> prompts_of(std::span<const ChatSample> samples);
std::vector<std::vector<int>> sequences_of(std::span<const ChatSample> samples);

// Hash over every split's canonical serialization.
std::string corpus_hash(const Corpus& corpus);

// Directory layout: one JSONL file per split plus manifest.json.
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus, const CorpusConfig& config,
                 const ModelConfig& model_config);

struct LoadedCorpus {
    Corpus corpus;
    CorpusConfig config;
    ModelConfig model_config;
    nlohmann::json manifest;
};

// Verifies each split file against the manifest hash; mismatch is a ValidationError.
LoadedCorpus load_corpus(const std::filesystem::path& dir);

}  // namespace mosr
