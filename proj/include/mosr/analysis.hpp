// SPDX-License-Identifier: Apache-2.0
//
// Representation diagnostics: layer-wise safety probes, over-refusal
// attribution, logit lens, PCA, paired cosine distances and per-token KL.
#pragma once

#include "mosr/tinylm.hpp"

#include <map>
#include <span>
#include <utility>
#include <vector>

namespace mosr {

// Last-position hidden state of every sequence at every layer: [layer][sample].
std::vector<std::vector<Vec>> last_token_states(const TransformerModel& model,
                                                std::span<const std::vector<int>> sequences);

enum class ProbeKind { linear_max_margin, feed_forward };
const char* to_string(ProbeKind kind);
ProbeKind probe_kind_from_string(const std::string& text);

struct ProbeOptions {
    ProbeKind kind = ProbeKind::linear_max_margin;
    double train_ratio = 0.7;
    std::uint64_t seed = 0;
    // Linear max-margin (hinge loss, dual coordinate descent).
    double svm_c = 1.0;
    int svm_max_epochs = 1000;
    // Feed-forward: one hidden tanh layer, Adam, early stopping on the held-out split.
    int hidden_width = 32;
    int max_epochs = 600;
    double learning_rate = 0.01;
    int patience = 60;
};

// Binary classifier on standardized features; positive = malicious.
struct LayerProbe {
    Vec mean, inv_scale;
    // Linear
    Vec weight;
    double bias = 0.0;
    // Feed-forward
    Mat w1;  // hidden x dim
    Vec b1, w2;
    double b2 = 0.0;

    double decision(const Vec& x, ProbeKind kind) const;
};

struct ProbeModel {
    ProbeKind kind = ProbeKind::linear_max_margin;
    bool fitted = false;
    std::vector<LayerProbe> layers;
    std::vector<double> test_accuracy;
    // On the held-out split: benign predicted malicious / malicious predicted malicious.
    std::vector<double> benign_false_positive_rate;
    std::vector<double> malicious_true_positive_rate;

    bool predict_malicious(int layer, const Vec& state) const;
};

// One probe per layer on last-token states, stratified train/test split.
ProbeModel train_probe(const TransformerModel& model, std::span<const std::vector<int>> benign,
                       std::span<const std::vector<int>> malicious, const ProbeOptions& options = {});

// Per-layer fraction of the set classified malicious.
std::vector<double> attribute_over_refusal(const ProbeModel& probe, std::span<const std::vector<int>> sequences,
                                           const TransformerModel& model);

struct LensResult {
    // Per layer: top-k (token, logit), logit descending.
    std::vector<std::vector<std::pair<int, double>>> layers;
};

LensResult logit_lens(const TransformerModel& model, std::span<const int> tokens, int k = 5);

// Lens logits (final norm, then unembedding) of the last position at every layer.
std::vector<Vec> lens_logits(const TransformerModel& model, std::span<const int> tokens);

struct PcaResult {
    std::vector<Vec> projections;
    std::vector<double> explained_ratio;
    Mat components;  // components x dim, unit rows
    Vec mean;
    int rank = 0;  // numerical rank, capped at the requested component count
};

PcaResult pca_project(std::span<const Vec> embeddings, int components = 2);

// Mean of 1 - cos over index-paired vectors (pairs up to the shorter list).
double paired_cosine_distance(std::span<const Vec> a, std::span<const Vec> b);

// layer -> paired cosine distance between last-token states of the two sets.
std::map<int, double> layerwise_cosine_distance(const TransformerModel& model, std::span<const std::vector<int>> set_a,
                                                std::span<const std::vector<int>> set_b);

std::vector<int> greedy_continuation(const TransformerModel& model, std::span<const int> prompt, int n_tokens);

struct KLProfile {
    std::vector<double> kl;          // position 1..N
    std::vector<std::size_t> counts;  // prompts contributing at each position
};

// Average over prompts of KL(p_i || q_i) between next-token distributions at
// response positions 1..n, teacher-forced on the continuation model's greedy
// decode (model_p when none is given).
KLProfile per_token_kl(const TransformerModel& model_p, const TransformerModel& model_q,
                       std::span<const std::vector<int>> prompts, int n_positions,
                       const TransformerModel* continuation_model = nullptr);

// KL(softmax(p) || softmax(q)) for logit vectors.
double kl_from_logits(const Vec& logits_p, const Vec& logits_q);

}  // namespace mosr
