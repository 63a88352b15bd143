// SPDX-License-Identifier: Apache-2.0
#include "mosr/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mosr {

namespace {

constexpr double kLayerNormEps = 1e-5;
// Std of token embeddings; position embeddings and the residual-branch output
// projections are scaled by the same factor.
constexpr double kResidualScale = 0.1;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr std::uint64_t kAdapterSeedSalt = 0x9e3779b97f4a7c15ULL;

Mat random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, stddev);
    return m;
}

Mat layer_norm(const Mat& x, const Vec& gain, const Vec& bias, LayerNormCache* cache) {
    const Eigen::Index rows = x.rows();
    const double width = static_cast<double>(x.cols());
    Mat normalized(rows, x.cols());
    Vec inv_std(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double mean = x.row(i).sum() / width;
        const RowVec centered = x.row(i).array() - mean;
        const double var = centered.squaredNorm() / width;
        inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
        normalized.row(i) = centered * inv_std(i);
    }
    Mat out = normalized.array().rowwise() * gain.transpose().array();
    out.array().rowwise() += bias.transpose().array();
    if (cache != nullptr) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

Mat layer_norm_backward(const LayerNormCache& cache, const Vec& gain, const Mat& grad_out) {
    const double width = static_cast<double>(grad_out.cols());
    Mat grad_norm = grad_out.array().rowwise() * gain.transpose().array();
    Mat grad_in(grad_out.rows(), grad_out.cols());
    for (Eigen::Index i = 0; i < grad_out.rows(); ++i) {
        const double mean_g = grad_norm.row(i).sum() / width;
        const double mean_gx = grad_norm.row(i).dot(cache.normalized.row(i)) / width;
        grad_in.row(i) = (grad_norm.row(i).array() - mean_g -
                          cache.normalized.row(i).array() * mean_gx) *
                         cache.inv_std(i);
    }
    return grad_in;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
    const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LinearView {
    const Mat& weight;
    const LowRankFactor* adapter;
    double multiplier;
};

LinearView linear_view(const TransformerModel& model, int layer, LinearSlot slot) {
    const auto& block = model.base().blocks[static_cast<std::size_t>(layer)];
    if (!model.has_adapters()) return {block.linear(slot), nullptr, 0.0};
    const auto& adapters = model.adapters();
    return {block.linear(slot),
            &adapters.layers[static_cast<std::size_t>(layer)][static_cast<std::size_t>(slot)],
            adapters.multiplier()};
}

Mat apply_linear(const LinearView& lin, const Mat& x, Mat* mid) {
    Mat y = x * lin.weight;
    if (lin.adapter != nullptr) {
        Mat xa = x * lin.adapter->a;
        y.noalias() += lin.multiplier * (xa * lin.adapter->b);
        if (mid != nullptr) *mid = std::move(xa);
    }
    return y;
}

Mat linear_backward(const LinearView& lin, const Mat& x, const Mat& mid, const Mat& grad_out,
                    LowRankFactor* grad) {
    Mat grad_in = grad_out * lin.weight.transpose();
    if (lin.adapter != nullptr) {
        const Mat grad_mid = lin.multiplier * (grad_out * lin.adapter->b.transpose());
        grad_in.noalias() += grad_mid * lin.adapter->a.transpose();
        if (grad != nullptr) {
            grad->a.noalias() += x.transpose() * grad_mid;
            grad->b.noalias() += lin.multiplier * (mid.transpose() * grad_out);
        }
    }
    return grad_in;
}

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
    if (tokens.empty()) throw InputError("empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
        throw InputError("sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw InputError("token id " + std::to_string(t) + " out of range [0, " +
                             std::to_string(cfg.vocab_size) + ")");
}

int check_layers(const ModelConfig& cfg, std::span<const int> layer_ids) {
    int top = -1;
    for (int l : layer_ids) {
        if (l < 0 || l >= cfg.n_layers)
            throw InputError("layer index " + std::to_string(l) + " out of range [0, " +
                             std::to_string(cfg.n_layers) + ")");
        top = std::max(top, l);
    }
    return top;
}

Mat embed(const TransformerModel& model, std::span<const int> tokens) {
    const auto& base = model.base();
    Mat x(static_cast<Eigen::Index>(tokens.size()), model.config().hidden_dim);
    for (std::size_t i = 0; i < tokens.size(); ++i)
        x.row(static_cast<Eigen::Index>(i)) = base.token_embedding.row(tokens[i]) +
                                              base.position_embedding.row(static_cast<Eigen::Index>(i));
    return x;
}

// One block in place on the residual stream.
void run_block(const TransformerModel& model, int layer, Mat& x, BlockTrace* trace) {
    const auto& cfg = model.config();
    const auto& block = model.base().blocks[static_cast<std::size_t>(layer)];
    const Eigen::Index seq = x.rows();
    const int hd = cfg.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    auto mid = [&](LinearSlot s) -> Mat* {
        return trace != nullptr ? &trace->adapter_mid[static_cast<std::size_t>(s)] : nullptr;
    };

    Mat a = layer_norm(x, block.ln1_gain, block.ln1_bias, trace ? &trace->ln1 : nullptr);
    Mat q = apply_linear(linear_view(model, layer, LinearSlot::query), a, mid(LinearSlot::query));
    Mat k = apply_linear(linear_view(model, layer, LinearSlot::key), a, mid(LinearSlot::key));
    Mat v = apply_linear(linear_view(model, layer, LinearSlot::value), a, mid(LinearSlot::value));

    Mat context(seq, cfg.hidden_dim);
    if (trace != nullptr) trace->probs.assign(static_cast<std::size_t>(cfg.n_heads), Mat());
    for (int h = 0; h < cfg.n_heads; ++h) {
        const auto qh = q.middleCols(h * hd, hd);
        const auto kh = k.middleCols(h * hd, hd);
        Mat scores = (qh * kh.transpose()) * inv_sqrt;
        Mat probs = Mat::Zero(seq, seq);
        for (Eigen::Index i = 0; i < seq; ++i) {
            const double mx = scores.row(i).head(i + 1).maxCoeff();
            double total = 0.0;
            for (Eigen::Index j = 0; j <= i; ++j) {
                probs(i, j) = std::exp(scores(i, j) - mx);
                total += probs(i, j);
            }
            probs.row(i).head(i + 1) /= total;
        }
        context.middleCols(h * hd, hd) = probs * v.middleCols(h * hd, hd);
        if (trace != nullptr) trace->probs[static_cast<std::size_t>(h)] = std::move(probs);
    }
    x += apply_linear(linear_view(model, layer, LinearSlot::output), context, mid(LinearSlot::output));

    Mat m = layer_norm(x, block.ln2_gain, block.ln2_bias, trace ? &trace->ln2 : nullptr);
    Mat pre = apply_linear(linear_view(model, layer, LinearSlot::up), m, mid(LinearSlot::up));
    Mat act = pre.unaryExpr([](double z) { return gelu(z); });
    x += apply_linear(linear_view(model, layer, LinearSlot::down), act, mid(LinearSlot::down));

    if (trace != nullptr) {
        trace->attn_in = std::move(a);
        trace->q = std::move(q);
        trace->k = std::move(k);
        trace->v = std::move(v);
        trace->context = std::move(context);
        trace->mlp_in = std::move(m);
        trace->pre_act = std::move(pre);
        trace->act = std::move(act);
    }
}

Vec final_norm_impl(const TransformerModel& model, const Eigen::Ref<const Vec>& hidden) {
    const Mat row = hidden.transpose();
    const auto& base = model.base();
    return layer_norm(row, base.final_gain, base.final_bias, nullptr).row(0).transpose();
}

// Row by row so a single position decodes bitwise-identically to the full pass.
Mat head_logits(const TransformerModel& model, const Mat& x) {
    const auto& base = model.base();
    Mat logits(x.rows(), base.unembedding.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        logits.row(i) = (base.unembedding * final_norm_impl(model, x.row(i).transpose())).transpose();
    return logits;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 1 || n_layers < 1 || hidden_dim < 1 || n_heads < 1 || max_seq_len < 1 ||
        ffn_mult < 1)
        throw InputError("model config: all counts must be >= 1");
    if (hidden_dim % n_heads != 0)
        throw InputError("model config: hidden_dim must be divisible by n_heads");
}

const Mat& BlockWeights::linear(LinearSlot slot) const {
    switch (slot) {
        case LinearSlot::query: return wq;
        case LinearSlot::key: return wk;
        case LinearSlot::value: return wv;
        case LinearSlot::output: return wo;
        case LinearSlot::up: return w_up;
        case LinearSlot::down: return w_down;
    }
    throw InputError("bad linear slot");
}

Mat& BlockWeights::linear(LinearSlot slot) {
    return const_cast<Mat&>(static_cast<const BlockWeights&>(*this).linear(slot));
}

bool BaseWeights::operator==(const BaseWeights& o) const {
    if (token_embedding != o.token_embedding || position_embedding != o.position_embedding ||
        final_gain != o.final_gain || final_bias != o.final_bias || unembedding != o.unembedding ||
        blocks.size() != o.blocks.size())
        return false;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& a = blocks[i];
        const auto& b = o.blocks[i];
        if (a.ln1_gain != b.ln1_gain || a.ln1_bias != b.ln1_bias || a.ln2_gain != b.ln2_gain ||
            a.ln2_bias != b.ln2_bias)
            return false;
        for (int s = 0; s < kLinearSlots; ++s)
            if (a.linear(static_cast<LinearSlot>(s)) != b.linear(static_cast<LinearSlot>(s)))
                return false;
    }
    return true;
}

std::size_t AdapterSet::parameter_count() const {
    std::size_t total = 0;
    for (const Mat* t : tensors()) total += static_cast<std::size_t>(t->size());
    return total;
}

std::vector<Mat*> AdapterSet::tensors() {
    std::vector<Mat*> out;
    for (auto& layer : layers)
        for (auto& f : layer) {
            out.push_back(&f.a);
            out.push_back(&f.b);
        }
    return out;
}

std::vector<const Mat*> AdapterSet::tensors() const {
    std::vector<const Mat*> out;
    for (const auto& layer : layers)
        for (const auto& f : layer) {
            out.push_back(&f.a);
            out.push_back(&f.b);
        }
    return out;
}

AdapterSet AdapterSet::zeros_like() const {
    AdapterSet z = *this;
    for (Mat* t : z.tensors()) t->setZero();
    return z;
}

bool AdapterSet::operator==(const AdapterSet& o) const {
    if (rank != o.rank || scale != o.scale || layers.size() != o.layers.size()) return false;
    const auto mine = tensors();
    const auto theirs = o.tensors();
    for (std::size_t i = 0; i < mine.size(); ++i)
        if (*mine[i] != *theirs[i]) return false;
    return true;
}

TransformerModel::TransformerModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const int d = config_.hidden_dim;
    const int f = config_.ffn_dim();
    const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double inv_f = 1.0 / std::sqrt(static_cast<double>(f));

    base_.token_embedding = random_matrix(rng, config_.vocab_size, d, kResidualScale);
    base_.position_embedding = random_matrix(rng, config_.max_seq_len, d, 0.3 * kResidualScale);
    base_.blocks.resize(static_cast<std::size_t>(config_.n_layers));
    for (auto& block : base_.blocks) {
        block.ln1_gain = Vec::Ones(d);
        block.ln1_bias = Vec::Zero(d);
        block.wq = random_matrix(rng, d, d, inv_d);
        block.wk = random_matrix(rng, d, d, inv_d);
        block.wv = random_matrix(rng, d, d, inv_d);
        block.wo = random_matrix(rng, d, d, inv_d * kResidualScale);
        block.ln2_gain = Vec::Ones(d);
        block.ln2_bias = Vec::Zero(d);
        block.w_up = random_matrix(rng, d, f, inv_d);
        block.w_down = random_matrix(rng, f, d, inv_f * kResidualScale);
    }
    base_.final_gain = Vec::Ones(d);
    base_.final_bias = Vec::Zero(d);
    base_.unembedding = random_matrix(rng, config_.vocab_size, d, inv_d);
}

BaseWeights& TransformerModel::mutable_base() {
    if (frozen_) throw StateError("model is frozen");
    if (adapters_) throw StateError("base weights are read-only while adapters are attached");
    return base_;
}

const AdapterSet& TransformerModel::adapters() const {
    if (!adapters_) throw StateError("no adapters attached");
    return *adapters_;
}

AdapterSet& TransformerModel::mutable_adapters() {
    if (frozen_) throw StateError("model is frozen");
    if (!adapters_) throw StateError("no adapters attached");
    return *adapters_;
}

void TransformerModel::attach(AdapterSet adapters) {
    if (frozen_) throw StateError("model is frozen");
    if (adapters_) throw StateError("adapters already attached");
    if (static_cast<int>(adapters.layers.size()) != config_.n_layers)
        throw InputError("adapter set layer count does not match model");
    adapters_ = std::move(adapters);
}

ForwardOutput forward_with_hidden(const TransformerModel& model, std::span<const int> tokens,
                                  std::span<const int> layer_ids) {
    const auto& cfg = model.config();
    check_tokens(cfg, tokens);
    check_layers(cfg, layer_ids);
    ForwardOutput out;
    Mat x = embed(model, tokens);
    for (int l = 0; l < cfg.n_layers; ++l) {
        run_block(model, l, x, nullptr);
        if (std::find(layer_ids.begin(), layer_ids.end(), l) != layer_ids.end()) out.hidden[l] = x;
    }
    out.logits = head_logits(model, x);
    return out;
}

std::map<int, Mat> hidden_states(const TransformerModel& model, std::span<const int> tokens,
                                 std::span<const int> layer_ids) {
    const auto& cfg = model.config();
    check_tokens(cfg, tokens);
    const int top = check_layers(cfg, layer_ids);
    std::map<int, Mat> out;
    Mat x = embed(model, tokens);
    for (int l = 0; l <= top; ++l) {
        run_block(model, l, x, nullptr);
        if (std::find(layer_ids.begin(), layer_ids.end(), l) != layer_ids.end()) out[l] = x;
    }
    return out;
}

Vec final_norm(const TransformerModel& model, const Eigen::Ref<const Vec>& hidden) {
    if (hidden.size() != model.config().hidden_dim)
        throw InputError("final_norm: vector has dimension " + std::to_string(hidden.size()) +
                         ", expected " + std::to_string(model.config().hidden_dim));
    return final_norm_impl(model, hidden);
}

Vec unembed(const Eigen::Ref<const Vec>& hidden, const TransformerModel& model) {
    if (hidden.size() != model.config().hidden_dim)
        throw InputError("unembed: vector has dimension " + std::to_string(hidden.size()) +
                         ", expected " + std::to_string(model.config().hidden_dim));
    return model.base().unembedding * hidden;
}

TransformerModel attach_adapters(TransformerModel model, int rank, double scale) {
    const auto& cfg = model.config();
    if (rank < 1 || rank >= cfg.hidden_dim)
        throw InputError("adapter rank must be in [1, hidden_dim)");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw InputError("adapter scale must be > 0");
    if (model.has_adapters()) throw StateError("adapters already attached");

    Rng rng(cfg.seed ^ kAdapterSeedSalt);
    AdapterSet set;
    set.rank = rank;
    set.scale = scale;
    set.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int s = 0; s < kLinearSlots; ++s) {
            const Mat& w = model.base().blocks[static_cast<std::size_t>(l)].linear(static_cast<LinearSlot>(s));
            auto& factor = set.layers[static_cast<std::size_t>(l)][static_cast<std::size_t>(s)];
            factor.a = random_matrix(rng, w.rows(), rank, 1.0 / std::sqrt(static_cast<double>(w.rows())));
            factor.b = Mat::Zero(rank, w.cols());
        }
    }
    model.attach(std::move(set));
    return model;
}

TransformerModel clone_frozen(const TransformerModel& model) {
    TransformerModel copy = model;
    copy.freeze();
    return copy;
}

ForwardTrace forward_traced(const TransformerModel& model, std::span<const int> tokens,
                            std::span<const int> layer_ids) {
    const auto& cfg = model.config();
    check_tokens(cfg, tokens);
    const int top = check_layers(cfg, layer_ids);
    ForwardTrace trace;
    trace.blocks.resize(static_cast<std::size_t>(top + 1));
    Mat x = embed(model, tokens);
    for (int l = 0; l <= top; ++l) {
        run_block(model, l, x, &trace.blocks[static_cast<std::size_t>(l)]);
        if (std::find(layer_ids.begin(), layer_ids.end(), l) != layer_ids.end()) trace.hidden[l] = x;
    }
    return trace;
}

AdapterSet adapter_gradients(const TransformerModel& model, const ForwardTrace& trace,
                             const std::map<int, Mat>& grad_hidden) {
    const auto& cfg = model.config();
    AdapterSet grad = model.adapters().zeros_like();
    if (grad_hidden.empty()) return grad;

    const int top = grad_hidden.rbegin()->first;
    if (top >= static_cast<int>(trace.blocks.size()))
        throw InputError("gradient requested above the traced layers");
    const Eigen::Index seq = grad_hidden.begin()->second.rows();
    const int hd = cfg.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    Mat g = Mat::Zero(seq, cfg.hidden_dim);
    for (int l = top; l >= 0; --l) {
        if (auto it = grad_hidden.find(l); it != grad_hidden.end()) g += it->second;
        const auto& bt = trace.blocks[static_cast<std::size_t>(l)];
        const auto& block = model.base().blocks[static_cast<std::size_t>(l)];
        auto& lg = grad.layers[static_cast<std::size_t>(l)];
        auto slot_grad = [&](LinearSlot s) { return &lg[static_cast<std::size_t>(s)]; };
        auto slot_mid = [&](LinearSlot s) -> const Mat& { return bt.adapter_mid[static_cast<std::size_t>(s)]; };

        // MLP
        Mat g_act = linear_backward(linear_view(model, l, LinearSlot::down), bt.act,
                                    slot_mid(LinearSlot::down), g, slot_grad(LinearSlot::down));
        Mat g_pre = g_act.array() * bt.pre_act.unaryExpr([](double z) { return gelu_grad(z); }).array();
        Mat g_m = linear_backward(linear_view(model, l, LinearSlot::up), bt.mlp_in,
                                  slot_mid(LinearSlot::up), g_pre, slot_grad(LinearSlot::up));
        g += layer_norm_backward(bt.ln2, block.ln2_gain, g_m);

        // Attention
        Mat g_ctx = linear_backward(linear_view(model, l, LinearSlot::output), bt.context,
                                    slot_mid(LinearSlot::output), g, slot_grad(LinearSlot::output));
        Mat g_q(seq, cfg.hidden_dim), g_k(seq, cfg.hidden_dim), g_v(seq, cfg.hidden_dim);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Mat& p = bt.probs[static_cast<std::size_t>(h)];
            const auto gc = g_ctx.middleCols(h * hd, hd);
            const Mat g_p = gc * bt.v.middleCols(h * hd, hd).transpose();
            g_v.middleCols(h * hd, hd) = p.transpose() * gc;
            const Vec row_dot = (g_p.array() * p.array()).rowwise().sum();
            const Mat g_s = (p.array() * (g_p.colwise() - row_dot).array()).matrix() * inv_sqrt;
            g_q.middleCols(h * hd, hd) = g_s * bt.k.middleCols(h * hd, hd);
            g_k.middleCols(h * hd, hd) = g_s.transpose() * bt.q.middleCols(h * hd, hd);
        }
        Mat g_a = linear_backward(linear_view(model, l, LinearSlot::query), bt.attn_in,
                                  slot_mid(LinearSlot::query), g_q, slot_grad(LinearSlot::query));
        g_a += linear_backward(linear_view(model, l, LinearSlot::key), bt.attn_in,
                               slot_mid(LinearSlot::key), g_k, slot_grad(LinearSlot::key));
        g_a += linear_backward(linear_view(model, l, LinearSlot::value), bt.attn_in,
                               slot_mid(LinearSlot::value), g_v, slot_grad(LinearSlot::value));
        g += layer_norm_backward(bt.ln1, block.ln1_gain, g_a);
    }
    return grad;
}

std::string Rng::serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (!is) throw ValidationError("corrupt RNG state");
}

}  // namespace mosr
