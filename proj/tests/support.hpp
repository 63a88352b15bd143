// SPDX-License-Identifier: Apache-2.0
//
// Shared test helpers. The oracle_* functions are written against plain
// nested vectors with explicit loops and never call into the library's math.
#pragma once

#include "mosr/io.hpp"
#include "mosr/losses.hpp"
#include "mosr/repr.hpp"
#include "mosr/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace mosr::test {

using Grid = std::vector<std::vector<std::vector<double>>>;  // [layer][token][dim]

inline Grid to_grid(const Representation& r) {
    Grid g(r.states.size());
    for (std::size_t l = 0; l < r.states.size(); ++l) {
        const Mat& m = r.states[l];
        g[l].assign(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
        for (Eigen::Index t = 0; t < m.rows(); ++t)
            for (Eigen::Index d = 0; d < m.cols(); ++d) g[l][static_cast<std::size_t>(t)][static_cast<std::size_t>(d)] = m(t, d);
    }
    return g;
}

inline double oracle_dot(const std::vector<double>& a, const std::vector<double>& b) {
    long double s = 0.0L;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
    return static_cast<double>(s);
}

inline double oracle_cos(const std::vector<double>& a, const std::vector<double>& b) {
    return oracle_dot(a, b) / (std::sqrt(oracle_dot(a, a)) * std::sqrt(oracle_dot(b, b)));
}

inline double oracle_rep_cosine(const Grid& a, const Grid& b) {
    long double s = 0.0L;
    std::size_t count = 0;
    for (std::size_t l = 0; l < a.size(); ++l)
        for (std::size_t t = 0; t < a[l].size(); ++t) {
            s += oracle_cos(a[l][t], b[l][t]);
            ++count;
        }
    return static_cast<double>(s / count);
}

inline double oracle_erase(const std::vector<double>& w, const std::vector<Grid>& frozen, const std::vector<Grid>& live,
                           bool keep_prefactor) {
    long double s = 0.0L;
    for (std::size_t i = 0; i < frozen.size(); ++i) {
        const double c = oracle_rep_cosine(frozen[i], live[i]);
        if (c > 0.0) s += w[i] * c;
    }
    return static_cast<double>(keep_prefactor ? s / frozen.size() : s);
}

inline double oracle_retain(const std::vector<Grid>& frozen, const std::vector<Grid>& live) {
    long double total = 0.0L;
    for (std::size_t i = 0; i < frozen.size(); ++i) {
        long double sq = 0.0L;
        for (std::size_t l = 0; l < frozen[i].size(); ++l)
            for (std::size_t t = 0; t < frozen[i][l].size(); ++t)
                for (std::size_t d = 0; d < frozen[i][l][t].size(); ++d) {
                    const long double diff = static_cast<long double>(frozen[i][l][t][d]) - live[i][l][t][d];
                    sq += diff * diff;
                }
        total += std::sqrt(sq);
    }
    return static_cast<double>(total / frozen.size());
}

inline std::pair<double, double> oracle_schedule(int t, int T, double alpha) {
    const double frac = static_cast<double>(t) / (2.0 * T);
    return {alpha - alpha * frac, alpha * frac};
}

inline std::vector<double> oracle_softmax(const std::vector<double>& s, double tau) {
    std::vector<long double> e(s.size());
    long double z = 0.0L;
    for (std::size_t i = 0; i < s.size(); ++i) {
        e[i] = std::exp(static_cast<long double>(s[i]) / tau);
        z += e[i];
    }
    std::vector<double> w(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) w[i] = static_cast<double>(e[i] / z);
    return w;
}

inline std::vector<double> oracle_pool(const Grid& g) {
    std::vector<double> out(g[0][0].size(), 0.0);
    for (const auto& layer : g) {
        std::vector<double> mean(out.size(), 0.0);
        for (const auto& tok : layer)
            for (std::size_t d = 0; d < tok.size(); ++d) mean[d] += tok[d] / static_cast<double>(layer.size());
        for (std::size_t d = 0; d < out.size(); ++d) out[d] += mean[d] / static_cast<double>(g.size());
    }
    return out;
}

inline double oracle_overlap(const Grid& g, const std::vector<double>& centroid) {
    return -oracle_cos(oracle_pool(g), centroid);
}

inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-300});
    return a == b ? 0.0 : std::abs(a - b) / denom;
}

inline Representation random_rep(Rng& rng, std::vector<int> layers, int tokens, int dim, double mean_shift = 0.0) {
    Representation r;
    r.layers = std::move(layers);
    for (std::size_t l = 0; l < r.layers.size(); ++l) {
        Mat m(tokens, dim);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(mean_shift, 1.0);
        r.states.push_back(std::move(m));
    }
    return r;
}

inline Representation perturbed(const Representation& base, Rng& rng, double noise) {
    Representation r = base;
    for (Mat& m : r.states)
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += rng.normal(0.0, noise);
    return r;
}

inline std::vector<int> random_tokens(Rng& rng, int n, int vocab) {
    std::vector<int> t(static_cast<std::size_t>(n));
    for (int& x : t) x = static_cast<int>(rng.below(static_cast<std::size_t>(vocab)));
    return t;
}

inline std::string hash_mat(const Mat& m) {
    std::string bytes(static_cast<std::size_t>(m.size()) * sizeof(double), '\0');
    std::memcpy(bytes.data(), m.data(), bytes.size());
    return sha256_hex(std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ":" + bytes);
}

// Hash of logits and every hidden state on a fixed set of inputs.
inline std::string output_fingerprint(const TransformerModel& model, const std::vector<std::vector<int>>& inputs) {
    std::vector<int> layers(static_cast<std::size_t>(model.config().n_layers));
    std::iota(layers.begin(), layers.end(), 0);
    std::string acc;
    for (const auto& x : inputs) {
        const auto out = forward_with_hidden(model, x, layers);
        acc += hash_mat(out.logits);
        for (const auto& [l, h] : out.hidden) acc += hash_mat(h);
    }
    return sha256_hex(acc);
}

// Randomizes every adapter factor so the live model departs from the frozen one.
inline void randomize_adapters(TransformerModel& model, Rng& rng, double stddev) {
    for (Mat* m : model.mutable_adapters().tensors())
        for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = rng.normal(0.0, stddev);
}

// Total loss c_us * erase + c_s * retain over adapter parameters, with the
// analytic gradient obtained by backpropagating the loss terms' gradients.
struct TotalLossProblem {
    TransformerModel* live = nullptr;
    const TransformerModel* frozen = nullptr;
    std::vector<int> layers;
    std::vector<std::vector<int>> unsafe;
    std::vector<std::vector<int>> safe;
    std::vector<double> weights;
    Coefficients coefficients;
    EraseNorm norm = EraseNorm::scaled_mean;

    std::vector<Representation> reps(const TransformerModel& m, const std::vector<std::vector<int>>& xs) const {
        std::vector<Representation> out;
        for (const auto& x : xs) out.push_back(gather_representation(m, x, layers));
        return out;
    }

    // Frozen targets never change between probes.
    mutable std::optional<std::pair<std::vector<Representation>, std::vector<Representation>>> frozen_reps;

    const std::pair<std::vector<Representation>, std::vector<Representation>>& targets() const {
        if (!frozen_reps) frozen_reps.emplace(reps(*frozen, unsafe), reps(*frozen, safe));
        return *frozen_reps;
    }

    LossProbe value() const {
        const auto& [fu, fs] = targets();
        const auto lu = reps(*live, unsafe), ls = reps(*live, safe);
        const auto e = erase_loss_terms(weights, fu, lu, norm);
        const auto r = retain_loss_terms(fs, ls);
        LossProbe p;
        p.value = total_loss(coefficients, e.value, r.value).total;
        for (double k : e.kink_args) p.kink_distance = std::min(p.kink_distance, k);
        for (double k : r.kink_args) p.kink_distance = std::min(p.kink_distance, k);
        return p;
    }

    std::vector<double> analytic() const {
        const auto& [fu, fs] = targets();
        const auto lu = reps(*live, unsafe), ls = reps(*live, safe);
        const auto e = erase_loss_terms(weights, fu, lu, norm);
        const auto r = retain_loss_terms(fs, ls);
        AdapterSet total = live->adapters().zeros_like();
        auto accumulate = [&](const std::vector<std::vector<int>>& xs, const RepGradient& g, double coef) {
            for (std::size_t i = 0; i < xs.size(); ++i) {
                const auto trace = forward_traced(*live, xs[i], layers);
                std::map<int, Mat> gh;
                for (std::size_t l = 0; l < layers.size(); ++l) gh[layers[l]] = g[i][l] * coef;
                const auto part = adapter_gradients(*live, trace, gh);
                auto dst = total.tensors();
                auto src = part.tensors();
                for (std::size_t k = 0; k < dst.size(); ++k) *dst[k] += *src[k];
            }
        };
        accumulate(unsafe, e.grad_live, coefficients.c_us);
        accumulate(safe, r.grad_live, coefficients.c_s);
        std::vector<double> flat;
        for (const Mat* m : total.tensors()) flat.insert(flat.end(), m->data(), m->data() + m->size());
        return flat;
    }

    std::vector<double*> parameters() const {
        std::vector<double*> out;
        for (Mat* m : live->mutable_adapters().tensors())
            for (Eigen::Index i = 0; i < m->size(); ++i) out.push_back(m->data() + i);
        return out;
    }
};

}  // namespace mosr::test
