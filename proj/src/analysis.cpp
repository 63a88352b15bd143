// SPDX-License-Identifier: Apache-2.0
#include "mosr/analysis.hpp"

#include "mosr/repr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mosr {

namespace {

struct Dataset {
    std::vector<Vec> x;
    std::vector<int> y;  // +1 malicious, -1 benign
};

void standardize_fit(const Dataset& train, LayerProbe& probe) {
    const Eigen::Index d = train.x.front().size();
    probe.mean = Vec::Zero(d);
    for (const auto& v : train.x) probe.mean += v;
    probe.mean /= static_cast<double>(train.x.size());
    Vec var = Vec::Zero(d);
    for (const auto& v : train.x) var += (v - probe.mean).cwiseAbs2();
    var /= static_cast<double>(train.x.size());
    probe.inv_scale = var.unaryExpr([](double s) { return s > 1e-24 ? 1.0 / std::sqrt(s) : 1.0; });
}

Vec standardized(const LayerProbe& p, const Vec& x) { return (x - p.mean).cwiseProduct(p.inv_scale); }

void fit_linear(const Dataset& train, const ProbeOptions& opt, Rng& rng, LayerProbe& probe) {
    const std::size_t n = train.x.size();
    std::vector<Vec> xs;
    xs.reserve(n);
    for (const auto& v : train.x) xs.push_back(standardized(probe, v));
    const Eigen::Index d = xs.front().size();
    probe.weight = Vec::Zero(d);
    probe.bias = 0.0;
    std::vector<double> alpha(n, 0.0);
    std::vector<double> q(n);
    for (std::size_t i = 0; i < n; ++i) q[i] = xs[i].squaredNorm() + 1.0;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int epoch = 0; epoch < opt.svm_max_epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        double max_pg = -std::numeric_limits<double>::infinity();
        double min_pg = std::numeric_limits<double>::infinity();
        for (std::size_t i : order) {
            const double yi = train.y[i];
            const double g = yi * (probe.weight.dot(xs[i]) + probe.bias) - 1.0;
            double pg = g;
            if (alpha[i] == 0.0) pg = std::min(g, 0.0);
            else if (alpha[i] == opt.svm_c) pg = std::max(g, 0.0);
            max_pg = std::max(max_pg, pg);
            min_pg = std::min(min_pg, pg);
            if (pg != 0.0) {
                const double old = alpha[i];
                alpha[i] = std::clamp(alpha[i] - g / q[i], 0.0, opt.svm_c);
                const double delta = (alpha[i] - old) * yi;
                probe.weight += delta * xs[i];
                probe.bias += delta;
            }
        }
        if (max_pg - min_pg < 1e-6) break;
    }
}

struct FeedForwardParams {
    Mat w1;
    Vec b1, w2;
    double b2 = 0.0;
};

double ff_loss(const FeedForwardParams& p, const Mat& x, const Vec& y01) {
    const Mat h = ((x * p.w1.transpose()).rowwise() + p.b1.transpose()).array().tanh();
    const Vec z = (h * p.w2).array() + p.b2;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        // log(1 + e^z) - y z, stable
        const double zi = z(i);
        loss += std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi))) - y01(i) * zi;
    }
    return loss / static_cast<double>(z.size());
}

void fit_feed_forward(const Dataset& train, const Dataset& held_out, const ProbeOptions& opt, Rng& rng,
                      LayerProbe& probe) {
    auto to_matrix = [&](const Dataset& ds, Mat& x, Vec& y) {
        x.resize(static_cast<Eigen::Index>(ds.x.size()), ds.x.front().size());
        y.resize(static_cast<Eigen::Index>(ds.x.size()));
        for (std::size_t i = 0; i < ds.x.size(); ++i) {
            x.row(static_cast<Eigen::Index>(i)) = standardized(probe, ds.x[i]).transpose();
            y(static_cast<Eigen::Index>(i)) = ds.y[i] > 0 ? 1.0 : 0.0;
        }
    };
    Mat xt, xv;
    Vec yt, yv;
    to_matrix(train, xt, yt);
    to_matrix(held_out, xv, yv);
    const Eigen::Index d = xt.cols();
    const int h = opt.hidden_width;

    FeedForwardParams p;
    p.w1.resize(h, d);
    for (Eigen::Index i = 0; i < p.w1.size(); ++i) p.w1.data()[i] = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    p.b1 = Vec::Zero(h);
    p.w2.resize(h);
    for (Eigen::Index i = 0; i < h; ++i) p.w2(i) = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(h)));

    FeedForwardParams m{Mat::Zero(h, d), Vec::Zero(h), Vec::Zero(h), 0.0};
    FeedForwardParams v = m;
    constexpr double b1c = 0.9, b2c = 0.999, eps = 1e-8;
    FeedForwardParams best = p;
    double best_loss = ff_loss(p, xv, yv);
    int since_best = 0;
    const double n = static_cast<double>(xt.rows());
    for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
        const Mat hid = ((xt * p.w1.transpose()).rowwise() + p.b1.transpose()).array().tanh();
        const Vec z = (hid * p.w2).array() + p.b2;
        const Vec dz = (z.unaryExpr([](double t) { return 1.0 / (1.0 + std::exp(-t)); }) - yt) / n;
        const Vec g_w2 = hid.transpose() * dz;
        const double g_b2 = dz.sum();
        const Mat d_pre = (dz * p.w2.transpose()).array() * (1.0 - hid.array().square());
        const Mat g_w1 = d_pre.transpose() * xt;
        const Vec g_b1 = d_pre.colwise().sum().transpose();

        const double c1 = 1.0 - std::pow(b1c, epoch);
        const double c2 = 1.0 - std::pow(b2c, epoch);
        auto adam = [&](auto& param, auto& mm, auto& vv, const auto& g) {
            mm = b1c * mm + (1.0 - b1c) * g;
            vv = b2c * vv + (1.0 - b2c) * g.cwiseAbs2();
            param -= (opt.learning_rate * (mm / c1).array() / ((vv / c2).array().sqrt() + eps)).matrix();
        };
        adam(p.w1, m.w1, v.w1, g_w1);
        adam(p.b1, m.b1, v.b1, g_b1);
        adam(p.w2, m.w2, v.w2, g_w2);
        m.b2 = b1c * m.b2 + (1.0 - b1c) * g_b2;
        v.b2 = b2c * v.b2 + (1.0 - b2c) * g_b2 * g_b2;
        p.b2 -= opt.learning_rate * (m.b2 / c1) / (std::sqrt(v.b2 / c2) + eps);

        const double loss = ff_loss(p, xv, yv);
        if (loss < best_loss) {
            best_loss = loss;
            best = p;
            since_best = 0;
        } else if (++since_best >= opt.patience) {
            break;
        }
    }
    probe.w1 = best.w1;
    probe.b1 = best.b1;
    probe.w2 = best.w2;
    probe.b2 = best.b2;
}

}  // namespace

std::vector<std::vector<Vec>> last_token_states(const TransformerModel& model,
                                                std::span<const std::vector<int>> sequences) {
    const int n_layers = model.config().n_layers;
    std::vector<int> layers(static_cast<std::size_t>(n_layers));
    std::iota(layers.begin(), layers.end(), 0);
    std::vector<std::vector<Vec>> out(static_cast<std::size_t>(n_layers));
    for (const auto& seq : sequences) {
        const auto hidden = hidden_states(model, seq, layers);
        for (int l = 0; l < n_layers; ++l) {
            const Mat& m = hidden.at(l);
            out[static_cast<std::size_t>(l)].push_back(m.row(m.rows() - 1).transpose());
        }
    }
    return out;
}

const char* to_string(ProbeKind kind) {
    return kind == ProbeKind::linear_max_margin ? "linear" : "feed_forward";
}

ProbeKind probe_kind_from_string(const std::string& text) {
    if (text == "linear" || text == "svm" || text == "max_margin") return ProbeKind::linear_max_margin;
    if (text == "feed_forward" || text == "mlp") return ProbeKind::feed_forward;
    throw InputError("unknown probe kind '" + text + "'");
}

double LayerProbe::decision(const Vec& x, ProbeKind kind) const {
    const Vec s = standardized(*this, x);
    if (kind == ProbeKind::linear_max_margin) return weight.dot(s) + bias;
    const Vec h = (w1 * s + b1).array().tanh();
    return h.dot(w2) + b2;
}

bool ProbeModel::predict_malicious(int layer, const Vec& state) const {
    if (!fitted) throw StateError("probe is not fitted");
    if (layer < 0 || layer >= static_cast<int>(layers.size())) throw InputError("probe layer out of range");
    return layers[static_cast<std::size_t>(layer)].decision(state, kind) > 0.0;
}

ProbeModel train_probe(const TransformerModel& model, std::span<const std::vector<int>> benign,
                       std::span<const std::vector<int>> malicious, const ProbeOptions& options) {
    if (benign.size() < 2 || malicious.size() < 2)
        throw InputError("train_probe: each class needs at least two samples for a train/test split");
    if (!(options.train_ratio > 0.0 && options.train_ratio < 1.0))
        throw InputError("train_probe: train_ratio must be in (0, 1)");

    Rng rng(options.seed);
    auto split = [&](std::size_t n) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        const auto n_train = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::lround(options.train_ratio * static_cast<double>(n))), 1, n - 1);
        return std::pair{std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train)),
                         std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end())};
    };
    const auto [benign_train, benign_test] = split(benign.size());
    const auto [mal_train, mal_test] = split(malicious.size());

    const auto benign_states = last_token_states(model, benign);
    const auto mal_states = last_token_states(model, malicious);

    ProbeModel probe;
    probe.kind = options.kind;
    const int n_layers = model.config().n_layers;
    for (int l = 0; l < n_layers; ++l) {
        const auto& bs = benign_states[static_cast<std::size_t>(l)];
        const auto& ms = mal_states[static_cast<std::size_t>(l)];
        Dataset train, test;
        for (auto i : benign_train) train.x.push_back(bs[i]), train.y.push_back(-1);
        for (auto i : mal_train) train.x.push_back(ms[i]), train.y.push_back(+1);
        for (auto i : benign_test) test.x.push_back(bs[i]), test.y.push_back(-1);
        for (auto i : mal_test) test.x.push_back(ms[i]), test.y.push_back(+1);

        LayerProbe lp;
        standardize_fit(train, lp);
        if (options.kind == ProbeKind::linear_max_margin)
            fit_linear(train, options, rng, lp);
        else
            fit_feed_forward(train, test, options, rng, lp);

        std::size_t correct = 0, fp = 0, tp = 0;
        for (std::size_t i = 0; i < test.x.size(); ++i) {
            const bool mal = lp.decision(test.x[i], options.kind) > 0.0;
            correct += mal == (test.y[i] > 0);
            fp += mal && test.y[i] < 0;
            tp += mal && test.y[i] > 0;
        }
        probe.layers.push_back(std::move(lp));
        probe.test_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(test.x.size()));
        probe.benign_false_positive_rate.push_back(static_cast<double>(fp) / static_cast<double>(benign_test.size()));
        probe.malicious_true_positive_rate.push_back(static_cast<double>(tp) / static_cast<double>(mal_test.size()));
    }
    probe.fitted = true;
    return probe;
}

std::vector<double> attribute_over_refusal(const ProbeModel& probe, std::span<const std::vector<int>> sequences,
                                           const TransformerModel& model) {
    if (!probe.fitted) throw StateError("attribute_over_refusal: probe is not fitted");
    if (sequences.empty()) throw InputError("attribute_over_refusal: empty set");
    if (static_cast<int>(probe.layers.size()) != model.config().n_layers)
        throw InputError("attribute_over_refusal: probe and model layer counts differ");
    const auto states = last_token_states(model, sequences);
    std::vector<double> out;
    for (std::size_t l = 0; l < states.size(); ++l) {
        std::size_t hits = 0;
        for (const auto& s : states[l]) hits += probe.predict_malicious(static_cast<int>(l), s);
        out.push_back(static_cast<double>(hits) / static_cast<double>(states[l].size()));
    }
    return out;
}

std::vector<Vec> lens_logits(const TransformerModel& model, std::span<const int> tokens) {
    const int n_layers = model.config().n_layers;
    std::vector<int> layers(static_cast<std::size_t>(n_layers));
    std::iota(layers.begin(), layers.end(), 0);
    const auto hidden = hidden_states(model, tokens, layers);
    std::vector<Vec> out;
    for (int l = 0; l < n_layers; ++l) {
        const Mat& m = hidden.at(l);
        out.push_back(unembed(final_norm(model, m.row(m.rows() - 1).transpose()), model));
    }
    return out;
}

LensResult logit_lens(const TransformerModel& model, std::span<const int> tokens, int k) {
    if (k < 1 || k > model.config().vocab_size) throw InputError("logit_lens: k must be in [1, vocab_size]");
    LensResult out;
    for (const Vec& logits : lens_logits(model, tokens)) {
        std::vector<int> ids(static_cast<std::size_t>(logits.size()));
        std::iota(ids.begin(), ids.end(), 0);
        std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
            return logits(a) != logits(b) ? logits(a) > logits(b) : a < b;
        });
        std::vector<std::pair<int, double>> top;
        for (int i = 0; i < k; ++i) top.emplace_back(ids[static_cast<std::size_t>(i)], logits(ids[static_cast<std::size_t>(i)]));
        out.layers.push_back(std::move(top));
    }
    return out;
}

PcaResult pca_project(std::span<const Vec> embeddings, int components) {
    if (embeddings.size() < 3) throw InputError("pca_project: need at least 3 vectors");
    const Eigen::Index d = embeddings.front().size();
    if (components < 1 || components > d) throw InputError("pca_project: components must be in [1, dim]");
    const auto n = static_cast<Eigen::Index>(embeddings.size());
    Mat x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (embeddings[static_cast<std::size_t>(i)].size() != d) throw InputError("pca_project: ragged input");
        x.row(i) = embeddings[static_cast<std::size_t>(i)].transpose();
    }
    PcaResult out;
    out.mean = x.colwise().mean().transpose();
    x.rowwise() -= out.mean.transpose();
    const Mat cov = (x.transpose() * x) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Mat> solver(cov);
    if (solver.info() != Eigen::Success) throw NumericError("pca_project: eigen decomposition failed");
    const Vec evals = solver.eigenvalues().cwiseMax(0.0);  // ascending
    const double total = evals.sum();
    const double tol = 1e-12 * std::max(evals.maxCoeff(), 1e-300);

    out.components = Mat::Zero(components, d);
    for (int c = 0; c < components; ++c) {
        const Eigen::Index col = d - 1 - c;
        const double lambda = evals(col);
        if (lambda <= tol || total <= 0.0) {
            out.explained_ratio.push_back(0.0);
            continue;
        }
        Vec axis = solver.eigenvectors().col(col);
        Eigen::Index arg = 0;
        axis.cwiseAbs().maxCoeff(&arg);
        if (axis(arg) < 0.0) axis = -axis;
        out.components.row(c) = axis.transpose();
        out.explained_ratio.push_back(lambda / total);
        ++out.rank;
    }
    for (Eigen::Index i = 0; i < n; ++i) out.projections.push_back(out.components * x.row(i).transpose());
    return out;
}

double paired_cosine_distance(std::span<const Vec> a, std::span<const Vec> b) {
    const std::size_t n = std::min(a.size(), b.size());
    if (n == 0) throw InputError("paired_cosine_distance: empty set");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += 1.0 - cosine_sim(a[i], b[i]);
    return total / static_cast<double>(n);
}

std::map<int, double> layerwise_cosine_distance(const TransformerModel& model, std::span<const std::vector<int>> set_a,
                                                std::span<const std::vector<int>> set_b) {
    if (set_a.empty() || set_b.empty()) throw InputError("layerwise_cosine_distance: empty set");
    const auto sa = last_token_states(model, set_a);
    const auto sb = last_token_states(model, set_b);
    std::map<int, double> out;
    for (std::size_t l = 0; l < sa.size(); ++l) out[static_cast<int>(l)] = paired_cosine_distance(sa[l], sb[l]);
    return out;
}

std::vector<int> greedy_continuation(const TransformerModel& model, std::span<const int> prompt, int n_tokens) {
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    const int room = model.config().max_seq_len - static_cast<int>(seq.size());
    for (int i = 0; i < std::min(n_tokens, room); ++i) {
        const auto fwd = forward_with_hidden(model, seq, {});
        const auto last = fwd.logits.row(fwd.logits.rows() - 1);
        Eigen::Index arg = 0;
        last.maxCoeff(&arg);
        seq.push_back(static_cast<int>(arg));
        out.push_back(static_cast<int>(arg));
    }
    return out;
}

double kl_from_logits(const Vec& logits_p, const Vec& logits_q) {
    if (logits_p.size() != logits_q.size()) throw InputError("kl_from_logits: vocabulary mismatch");
    auto log_softmax = [](const Vec& z) {
        const double mx = z.maxCoeff();
        const double lse = mx + std::log((z.array() - mx).exp().sum());
        return Vec(z.array() - lse);
    };
    const Vec lp = log_softmax(logits_p);
    const Vec lq = log_softmax(logits_q);
    double kl = 0.0;
    for (Eigen::Index i = 0; i < lp.size(); ++i) kl += std::exp(lp(i)) * (lp(i) - lq(i));
    return std::max(kl, 0.0);
}

KLProfile per_token_kl(const TransformerModel& model_p, const TransformerModel& model_q,
                       std::span<const std::vector<int>> prompts, int n_positions,
                       const TransformerModel* continuation_model) {
    if (model_p.config().vocab_size != model_q.config().vocab_size)
        throw InputError("per_token_kl: models have different vocabularies");
    if (prompts.empty()) throw InputError("per_token_kl: no prompts");
    if (n_positions < 1) throw InputError("per_token_kl: n_positions must be >= 1");
    const TransformerModel& cont_model = continuation_model != nullptr ? *continuation_model : model_p;

    KLProfile out;
    out.kl.assign(static_cast<std::size_t>(n_positions), 0.0);
    out.counts.assign(static_cast<std::size_t>(n_positions), 0);
    for (const auto& prompt : prompts) {
        const auto cont = greedy_continuation(cont_model, prompt, n_positions);
        std::vector<int> seq = prompt;
        // Position i conditions on the prompt and the first i-1 continuation tokens.
        const int usable = std::min<int>(n_positions, model_p.config().max_seq_len - static_cast<int>(prompt.size()) + 1);
        if (usable < 1) continue;
        seq.insert(seq.end(), cont.begin(), cont.begin() + std::min<int>(static_cast<int>(cont.size()), usable - 1));
        const auto lp = forward_with_hidden(model_p, seq, {}).logits;
        const auto lq = forward_with_hidden(model_q, seq, {}).logits;
        const Eigen::Index first = static_cast<Eigen::Index>(prompt.size()) - 1;
        for (int i = 0; i < usable; ++i) {
            const Eigen::Index row = first + i;
            if (row >= lp.rows()) break;
            out.kl[static_cast<std::size_t>(i)] += kl_from_logits(lp.row(row).transpose(), lq.row(row).transpose());
            ++out.counts[static_cast<std::size_t>(i)];
        }
    }
    for (std::size_t i = 0; i < out.kl.size(); ++i)
        if (out.counts[i] > 0) out.kl[i] /= static_cast<double>(out.counts[i]);
    return out;
}

}  // namespace mosr
