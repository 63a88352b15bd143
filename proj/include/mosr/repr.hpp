// SPDX-License-Identifier: Apache-2.0
//
// Representations, pooling, the over-refusal centroid and overlap-aware batch
// weights.
#pragma once

#include "mosr/tinylm.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mosr {

// Hidden states of every token at a fixed set of layers for one sample.
struct Representation {
    std::vector<int> layers;
    std::vector<Mat> states;  // parallel to `layers`, each tokens x hidden_dim
    std::string sample_id;

    std::size_t tokens() const { return states.empty() ? 0 : static_cast<std::size_t>(states.front().rows()); }
};

Representation gather_representation(const TransformerModel& model, std::span<const int> tokens,
                                      std::span<const int> layer_ids, std::string sample_id = {});

// Token mean per layer, then mean over layers.
Vec pool(const Representation& rep);

double cosine_sim(const Eigen::Ref<const Vec>& a, const Eigen::Ref<const Vec>& b);

// Per-token, per-layer cosine averaged uniformly. Shapes must match.
double rep_cosine(const Representation& a, const Representation& b);

struct OverRefusalCentroid {
    Vec vector;
    std::size_t dataset_size = 0;
    std::vector<int> layers;
    std::string dataset_hash;
};

// Hash of a token-sequence dataset, used to tie a centroid to its inputs.
std::string dataset_hash(std::span<const std::vector<int>> sequences);

OverRefusalCentroid compute_centroid(std::span<const std::vector<int>> over_refusal_sequences,
                                     const TransformerModel& frozen_model, std::span<const int> layer_ids);

// S = -cos(pool(rep), centroid). Higher means less like the over-refusal set.
double overlap_score(const Vec& pooled, const OverRefusalCentroid& centroid);
double overlap_score(const Representation& rep, const OverRefusalCentroid& centroid);

struct WeightingConfig {
    double temperature = 1.0;

    void validate() const;
};

// softmax(scores / temperature).
std::vector<double> batch_weights(std::span<const double> scores, double temperature);

void save_centroid(const std::filesystem::path& path, const OverRefusalCentroid& centroid);
OverRefusalCentroid load_centroid(const std::filesystem::path& path);

}  // namespace mosr
