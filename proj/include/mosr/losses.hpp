// SPDX-License-Identifier: Apache-2.0
//
// Erase / retain losses, the coefficient schedule, and a finite-difference
// gradient checker. Frozen representations are constants; gradients are with
// respect to the live model's hidden states.
#pragma once

#include "mosr/repr.hpp"

#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace mosr {

// scaled_mean keeps the 1/n prefactor in front of the softmax-weighted sum;
// sum_to_one drops it, which makes uniform weights reproduce the unweighted form.
enum class EraseNorm { scaled_mean, sum_to_one };

const char* to_string(EraseNorm norm);
EraseNorm erase_norm_from_string(const std::string& text);

// Gradient of a loss with respect to each sample's live states, same layout as
// Representation::states.
using RepGradient = std::vector<std::vector<Mat>>;

struct LossTerms {
    double value = 0.0;
    RepGradient grad_live;
    // Distance of each non-smooth point from its kink (|cos| for ReLU, norm for L2).
    std::vector<double> kink_args;
};

double erase_loss(std::span<const double> weights, std::span<const Representation> frozen,
                  std::span<const Representation> live, EraseNorm norm = EraseNorm::scaled_mean);

// Unweighted form: (1/n) * sum ReLU(cos).
double erase_loss_unweighted(std::span<const Representation> frozen, std::span<const Representation> live);

double retain_loss(std::span<const Representation> frozen, std::span<const Representation> live);

LossTerms erase_loss_terms(std::span<const double> weights, std::span<const Representation> frozen,
                           std::span<const Representation> live, EraseNorm norm = EraseNorm::scaled_mean);
LossTerms retain_loss_terms(std::span<const Representation> frozen, std::span<const Representation> live);

struct Coefficients {
    double c_us = 0.0;
    double c_s = 0.0;
};

// c_us = alpha (1 - t / 2T), c_s = alpha t / 2T for integer 1 <= t <= T.
Coefficients schedule(int step, int total_steps, double alpha);
// Same formulas on the closed interval 0 <= t <= T.
Coefficients schedule_at(double t, int total_steps, double alpha);

struct LossBreakdown {
    double erase = 0.0;
    double retain = 0.0;
    double c_us = 0.0;
    double c_s = 0.0;
    double total = 0.0;
    std::vector<double> weights;
};

LossBreakdown total_loss(const Coefficients& coefficients, double erase, double retain,
                         std::vector<double> weights = {});

struct LossProbe {
    double value = 0.0;
    // Smallest distance to a non-differentiable point; +inf when smooth.
    double kink_distance = std::numeric_limits<double>::infinity();
};

struct GradCheckOptions {
    double epsilon = 1e-4;
    double tolerance = 1e-4;
    std::size_t samples = 200;
    std::uint64_t seed = 0;
    double kink_factor = 10.0;
    // Relative error uses max(|analytic|, |numeric|, floor) as denominator.
    double denominator_floor = 1e-7;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
    std::size_t worst_index = 0;
    bool passed = false;
};

// Central differences on a random subsample of `parameters`, compared with
// `analytic` (same indexing). Parameters are perturbed in place and restored.
GradCheckReport grad_check(const std::function<LossProbe()>& loss, std::span<double* const> parameters,
                           std::span<const double> analytic, const GradCheckOptions& options = {});

}  // namespace mosr
