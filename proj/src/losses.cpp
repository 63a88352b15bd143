// SPDX-License-Identifier: Apache-2.0
#include "mosr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mosr {

namespace {

void check_pairs(std::span<const Representation> frozen, std::span<const Representation> live, const char* who) {
    if (frozen.size() != live.size())
        throw InputError(std::string(who) + ": frozen/live batch sizes differ");
    if (frozen.empty()) throw InputError(std::string(who) + ": empty batch");
    for (std::size_t i = 0; i < frozen.size(); ++i) {
        if (frozen[i].layers != live[i].layers) throw InputError(std::string(who) + ": layer sets differ");
        for (std::size_t l = 0; l < frozen[i].states.size(); ++l)
            if (frozen[i].states[l].rows() != live[i].states[l].rows() ||
                frozen[i].states[l].cols() != live[i].states[l].cols())
                throw InputError(std::string(who) + ": shape mismatch");
    }
}

double prefactor(EraseNorm norm, std::size_t n) {
    return norm == EraseNorm::scaled_mean ? 1.0 / static_cast<double>(n) : 1.0;
}

// d rep_cosine / d live, plus the value.
double rep_cosine_grad(const Representation& frozen, const Representation& live, std::vector<Mat>* grad) {
    std::size_t count = 0;
    for (const Mat& m : frozen.states) count += static_cast<std::size_t>(m.rows());
    const double inv_count = 1.0 / static_cast<double>(count);
    double total = 0.0;
    if (grad != nullptr) grad->clear();
    for (std::size_t l = 0; l < frozen.states.size(); ++l) {
        const Mat& f = frozen.states[l];
        const Mat& g = live.states[l];
        Mat gl(g.rows(), g.cols());
        for (Eigen::Index t = 0; t < f.rows(); ++t) {
            const double nf = f.row(t).norm();
            const double ng = g.row(t).norm();
            if (nf == 0.0 || ng == 0.0) throw InputError("rep_cosine: zero token vector");
            const double c = f.row(t).dot(g.row(t)) / (nf * ng);
            total += c;
            gl.row(t) = (f.row(t) / (nf * ng) - c * g.row(t) / (ng * ng)) * inv_count;
        }
        if (grad != nullptr) grad->push_back(std::move(gl));
    }
    return total * inv_count;
}

}  // namespace

const char* to_string(EraseNorm norm) { return norm == EraseNorm::scaled_mean ? "scaled-mean" : "sum-to-one"; }

EraseNorm erase_norm_from_string(const std::string& text) {
    if (text == "scaled-mean") return EraseNorm::scaled_mean;
    if (text == "sum-to-one" || text == "sum_to_one") return EraseNorm::sum_to_one;
    throw InputError("erase_norm must be 'scaled-mean' or 'sum-to-one', got '" + text + "'");
}

double erase_loss(std::span<const double> weights, std::span<const Representation> frozen,
                  std::span<const Representation> live, EraseNorm norm) {
    check_pairs(frozen, live, "erase_loss");
    if (weights.size() != frozen.size()) throw InputError("erase_loss: weight count differs from batch size");
    double acc = 0.0;
    for (std::size_t i = 0; i < frozen.size(); ++i)
        acc += weights[i] * std::max(0.0, rep_cosine(frozen[i], live[i]));
    return prefactor(norm, frozen.size()) * acc;
}

double erase_loss_unweighted(std::span<const Representation> frozen, std::span<const Representation> live) {
    check_pairs(frozen, live, "erase_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < frozen.size(); ++i) acc += std::max(0.0, rep_cosine(frozen[i], live[i]));
    return acc / static_cast<double>(frozen.size());
}

double retain_loss(std::span<const Representation> frozen, std::span<const Representation> live) {
    check_pairs(frozen, live, "retain_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < frozen.size(); ++i) {
        double sq = 0.0;
        for (std::size_t l = 0; l < frozen[i].states.size(); ++l)
            sq += (frozen[i].states[l] - live[i].states[l]).squaredNorm();
        acc += std::sqrt(sq);
    }
    return acc / static_cast<double>(frozen.size());
}

LossTerms erase_loss_terms(std::span<const double> weights, std::span<const Representation> frozen,
                           std::span<const Representation> live, EraseNorm norm) {
    check_pairs(frozen, live, "erase_loss");
    if (weights.size() != frozen.size()) throw InputError("erase_loss: weight count differs from batch size");
    const double pre = prefactor(norm, frozen.size());
    LossTerms out;
    out.grad_live.resize(frozen.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < frozen.size(); ++i) {
        auto& g = out.grad_live[i];
        const double c = rep_cosine_grad(frozen[i], live[i], &g);
        out.kink_args.push_back(std::abs(c));
        const double coef = c > 0.0 ? pre * weights[i] : 0.0;
        acc += weights[i] * std::max(0.0, c);
        for (Mat& m : g) m *= coef;
    }
    out.value = pre * acc;
    return out;
}

LossTerms retain_loss_terms(std::span<const Representation> frozen, std::span<const Representation> live) {
    check_pairs(frozen, live, "retain_loss");
    const double inv_n = 1.0 / static_cast<double>(frozen.size());
    LossTerms out;
    out.grad_live.resize(frozen.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < frozen.size(); ++i) {
        double sq = 0.0;
        for (std::size_t l = 0; l < frozen[i].states.size(); ++l)
            sq += (frozen[i].states[l] - live[i].states[l]).squaredNorm();
        const double norm = std::sqrt(sq);
        acc += norm;
        out.kink_args.push_back(norm);
        auto& g = out.grad_live[i];
        for (std::size_t l = 0; l < frozen[i].states.size(); ++l) {
            // Subgradient 0 at the kink (live == frozen).
            if (norm > 0.0)
                g.push_back((live[i].states[l] - frozen[i].states[l]) * (inv_n / norm));
            else
                g.push_back(Mat::Zero(live[i].states[l].rows(), live[i].states[l].cols()));
        }
    }
    out.value = acc * inv_n;
    return out;
}

Coefficients schedule_at(double t, int total_steps, double alpha) {
    if (total_steps < 1) throw InputError("schedule: total steps must be >= 1");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InputError("schedule: alpha must be > 0");
    if (!(t >= 0.0) || t > static_cast<double>(total_steps)) throw InputError("schedule: step out of range");
    const double frac = t / (2.0 * static_cast<double>(total_steps));
    return {alpha * (1.0 - frac), alpha * frac};
}

Coefficients schedule(int step, int total_steps, double alpha) {
    if (step < 1 || step > total_steps)
        throw InputError("schedule: step " + std::to_string(step) + " outside [1, " +
                         std::to_string(total_steps) + "]");
    return schedule_at(static_cast<double>(step), total_steps, alpha);
}

LossBreakdown total_loss(const Coefficients& c, double erase, double retain, std::vector<double> weights) {
    if (!std::isfinite(erase) || !std::isfinite(retain) || !std::isfinite(c.c_us) || !std::isfinite(c.c_s))
        throw NumericError("total_loss: non-finite component");
    LossBreakdown b;
    b.erase = erase;
    b.retain = retain;
    b.c_us = c.c_us;
    b.c_s = c.c_s;
    b.total = c.c_us * erase + c.c_s * retain;
    b.weights = std::move(weights);
    return b;
}

GradCheckReport grad_check(const std::function<LossProbe()>& loss, std::span<double* const> parameters,
                           std::span<const double> analytic, const GradCheckOptions& options) {
    if (parameters.size() != analytic.size()) throw InputError("grad_check: gradient size mismatch");
    if (!(options.epsilon > 0.0)) throw InputError("grad_check: epsilon must be > 0");

    std::vector<std::size_t> indices(parameters.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (options.samples < indices.size()) {
        Rng rng(options.seed);
        for (std::size_t i = 0; i < options.samples; ++i)
            std::swap(indices[i], indices[i + rng.below(indices.size() - i)]);
        indices.resize(options.samples);
    }

    auto probe = [&]() {
        const LossProbe p = loss();
        if (!std::isfinite(p.value)) throw NumericError("grad_check: non-finite loss while probing");
        return p;
    };

    GradCheckReport report;
    const double kink_band = options.kink_factor * options.epsilon;
    const LossProbe center = probe();
    for (std::size_t idx : indices) {
        double& p = *parameters[idx];
        const double saved = p;
        p = saved + options.epsilon;
        const LossProbe plus = probe();
        p = saved - options.epsilon;
        const LossProbe minus = probe();
        p = saved;
        if (std::min({center.kink_distance, plus.kink_distance, minus.kink_distance}) < kink_band) {
            ++report.skipped_kinks;
            continue;
        }
        const double numeric = (plus.value - minus.value) / (2.0 * options.epsilon);
        const double denom = std::max({std::abs(analytic[idx]), std::abs(numeric), options.denominator_floor});
        const double rel = std::abs(analytic[idx] - numeric) / denom;
        if (rel > report.max_relative_error || report.checked == 0) {
            report.max_relative_error = std::max(report.max_relative_error, rel);
            if (rel >= report.max_relative_error) report.worst_index = idx;
        }
        ++report.checked;
    }
    report.passed = report.checked > 0 && report.max_relative_error < options.tolerance;
    return report;
}

}  // namespace mosr
