// SPDX-License-Identifier: Apache-2.0
//
// A minimal decoder-only transformer: pre-norm blocks, causal attention,
// learned positional embeddings, GELU MLP, tied-free unembedding. Every linear
// projection can carry a low-rank adapter; gradients are computed by hand and
// flow only into adapter factors.
#pragma once

#include "mosr/common.hpp"

#include <array>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace mosr {

struct ModelConfig {
    int vocab_size = 256;
    int n_layers = 4;
    int hidden_dim = 64;
    int n_heads = 4;
    int max_seq_len = 64;
    int ffn_mult = 4;
    std::uint64_t seed = 0;

    void validate() const;
    int head_dim() const { return hidden_dim / n_heads; }
    int ffn_dim() const { return hidden_dim * ffn_mult; }

    bool operator==(const ModelConfig&) const = default;
};

// The six linear projections of a block, in adapter storage order.
enum class LinearSlot : int { query = 0, key, value, output, up, down };
inline constexpr int kLinearSlots = 6;

struct BlockWeights {
    Vec ln1_gain, ln1_bias;
    Mat wq, wk, wv, wo;
    Vec ln2_gain, ln2_bias;
    Mat w_up, w_down;

    const Mat& linear(LinearSlot slot) const;
    Mat& linear(LinearSlot slot);
};

struct BaseWeights {
    Mat token_embedding;     // vocab x hidden
    Mat position_embedding;  // max_seq_len x hidden
    std::vector<BlockWeights> blocks;
    Vec final_gain, final_bias;
    Mat unembedding;         // vocab x hidden; logits = h * unembedding^T

    bool operator==(const BaseWeights& other) const;
};

// y = x W + (scale / rank) * (x A) B, with A: fan_in x rank and B: rank x fan_out.
struct LowRankFactor {
    Mat a;
    Mat b;
};

struct AdapterSet {
    int rank = 0;
    double scale = 0.0;
    std::vector<std::array<LowRankFactor, kLinearSlots>> layers;

    double multiplier() const { return scale / static_cast<double>(rank); }
    std::size_t parameter_count() const;

    // Flat tensor order: layer-major, slot, then (a, b).
    std::vector<Mat*> tensors();
    std::vector<const Mat*> tensors() const;

    // Same shapes, all zeros.
    AdapterSet zeros_like() const;

    bool operator==(const AdapterSet& other) const;
};

class TransformerModel {
public:
    explicit TransformerModel(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    bool frozen() const { return frozen_; }
    bool has_adapters() const { return adapters_.has_value(); }

    const BaseWeights& base() const { return base_; }
    // Throws StateError when frozen or when adapters are attached.
    BaseWeights& mutable_base();

    const AdapterSet& adapters() const;
    // Throws StateError when frozen or when no adapters are attached.
    AdapterSet& mutable_adapters();

    void attach(AdapterSet adapters);
    void freeze() { frozen_ = true; }

private:
    ModelConfig config_;
    BaseWeights base_;
    std::optional<AdapterSet> adapters_;
    bool frozen_ = false;
};

struct ForwardOutput {
    std::map<int, Mat> hidden;  // layer -> seq_len x hidden_dim (post-block residual)
    Mat logits;                 // seq_len x vocab
};

ForwardOutput forward_with_hidden(const TransformerModel& model, std::span<const int> tokens,
                                  std::span<const int> layer_ids);

// Hidden states at the requested layers only; stops after the highest one and
// skips the unembedding.
std::map<int, Mat> hidden_states(const TransformerModel& model, std::span<const int> tokens,
                                 std::span<const int> layer_ids);

// Final layer norm (the one applied before the head).
Vec final_norm(const TransformerModel& model, const Eigen::Ref<const Vec>& hidden);

// Raw unembedding of a hidden-size vector. No bias.
Vec unembed(const Eigen::Ref<const Vec>& hidden, const TransformerModel& model);

// Attach zero-initialised adapters to every linear projection. Base weights
// become read-only.
TransformerModel attach_adapters(TransformerModel model, int rank, double scale);

TransformerModel clone_frozen(const TransformerModel& model);

// Per-block activations kept for the backward pass.
struct LayerNormCache {
    Mat normalized;  // (x - mean) * inv_std
    Vec inv_std;
};

struct BlockTrace {
    LayerNormCache ln1;
    Mat attn_in, q, k, v;
    std::vector<Mat> probs;  // per head, seq x seq
    Mat context;
    LayerNormCache ln2;
    Mat mlp_in, pre_act, act;
    std::array<Mat, kLinearSlots> adapter_mid;  // x A per slot, empty without adapters
};

struct ForwardTrace {
    std::vector<BlockTrace> blocks;  // blocks 0..top_layer
    std::map<int, Mat> hidden;
};

// Runs blocks 0..max(layer_ids) and records what the backward pass needs.
ForwardTrace forward_traced(const TransformerModel& model, std::span<const int> tokens,
                            std::span<const int> layer_ids);

// Backpropagates dL/d(hidden[layer]) down to the adapter factors. Returns a
// gradient with the adapter set's layout.
AdapterSet adapter_gradients(const TransformerModel& model, const ForwardTrace& trace,
                             const std::map<int, Mat>& grad_hidden);

}  // namespace mosr
