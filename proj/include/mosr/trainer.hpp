// SPDX-License-Identifier: Apache-2.0
//
// Adapter-only alignment training: each step draws an unsafe and a safe batch,
// weights the unsafe samples by their overlap with the over-refusal centroid,
// optionally prefixes refusal targets with harmful context, and combines the
// erase and retain losses under the linear coefficient schedule.
#pragma once

#include "mosr/data.hpp"
#include "mosr/losses.hpp"
#include "mosr/repr.hpp"
#include "mosr/tinylm.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mosr {

struct TrainConfig {
    int total_steps = 180;
    int batch_size = 4;
    int grad_accumulation = 4;
    double learning_rate = 1e-2;
    double loss_alpha = 10.0;
    double temperature = 1.0;
    int prefix_len_tokens = 10;
    std::vector<int> layer_ids = {2, 3};
    int adapter_rank = 8;
    double adapter_scale = 10.0;
    // Std of the one-off perturbation of the adapters' B factors before step 1.
    // Zero keeps the live model identical to the frozen one, where every loss
    // gradient vanishes.
    double adapter_init_std = 0.01;
    bool overlap_weighting = true;
    bool context_augmentation = true;
    EraseNorm erase_norm = EraseNorm::sum_to_one;
    int checkpoint_every = 0;
    std::uint64_t seed = 1234;

    void validate(const ModelConfig& model) const;
    KeyValueConfig to_kv() const;
    static TrainConfig from_kv(const KeyValueConfig& kv);
    static std::vector<std::string> known_keys();
    // Hash of the canonical key-value form.
    std::string hash() const;
    // "baseline", "weighting", "augmentation" or "mosr".
    std::string variant() const;
};

struct StepRecord {
    int step = 0;
    LossBreakdown loss;
};

std::string loss_csv_header();
std::string loss_csv_row(const StepRecord& record);

struct AdamState {
    AdapterSet m;
    AdapterSet v;
    long long updates = 0;
};

class Trainer {
public:
    Trainer(const TrainConfig& config, const Corpus& corpus, const ModelConfig& model_config);

    // Restores a state written by save(). The config and corpus must hash to
    // the values recorded in the checkpoint.
    static Trainer resume(const std::filesystem::path& checkpoint, const TrainConfig& config, const Corpus& corpus);

    // Runs steps until `step() == until` (default: all). A no-op once finished.
    void run(std::optional<int> until = std::nullopt);
    void run_step();

    int step() const { return step_; }
    bool finished() const { return step_ >= config_.total_steps; }

    const TrainConfig& config() const { return config_; }
    const TransformerModel& live() const { return live_; }
    const TransformerModel& frozen() const { return frozen_; }
    const OverRefusalCentroid& centroid() const { return centroid_; }
    const std::vector<StepRecord>& log() const { return log_; }
    const std::string& corpus_hash() const { return corpus_hash_; }

    std::string loss_csv() const;
    void save(const std::filesystem::path& path) const;

private:
    struct Prepared {
        std::vector<int> tokens;
        std::string key;  // cache key for the frozen representation
    };

    Trainer(const TrainConfig& config, const Corpus& corpus, TransformerModel live, TransformerModel frozen);

    Prepared prepare_unsafe(std::size_t index) const;
    Prepared prepare_safe(std::size_t index) const;
    const Representation& frozen_rep(const Prepared& p);
    [[noreturn]] void fail_numeric(const std::string& what, const std::vector<std::size_t>& us,
                                   const std::vector<std::size_t>& s, const std::vector<double>& w) const;
    void apply_update();

    TrainConfig config_;
    const Corpus* corpus_;
    std::string corpus_hash_;
    TransformerModel live_;
    TransformerModel frozen_;
    OverRefusalCentroid centroid_;
    std::map<std::string, std::size_t> unsafe_by_prompt_;
    std::map<std::string, Representation> frozen_cache_;
    std::map<std::string, double> score_cache_;

    int step_ = 0;
    Rng rng_;
    AdamState adam_;
    AdapterSet grad_buffer_;
    int micro_steps_ = 0;
    std::vector<StepRecord> log_;
};

// The frozen base model a trainer starts from (no adapters).
TransformerModel strip_adapters(const TransformerModel& model);

struct TrainSummary {
    // Mean rep_cosine between frozen and live on held-out unsafe samples.
    double heldout_unsafe_cosine = 0.0;
    // Mean retain distance on held-out benign conversations.
    double heldout_benign_retain = 0.0;
    // Layer-wise benign_eval vs or_eval cosine distance, per alignment layer.
    std::map<int, double> benign_or_distance;
};

TrainSummary summarize(const Trainer& trainer, const Corpus& corpus);

}  // namespace mosr
