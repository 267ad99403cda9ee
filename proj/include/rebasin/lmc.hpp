// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "rebasin/matching.hpp"
#include "rebasin/model.hpp"
#include "rebasin/numerics.hpp"
#include "rebasin/parallel.hpp"
#include "rebasin/symmetry.hpp"

namespace rebasin {

using LossFn = std::function<double(const MoEParams&)>;
using MetricFn = std::function<double(const MoEParams&)>;

inline std::vector<double> uniform_grid(std::size_t points = 25) {
    if (points < 2) throw std::invalid_argument("uniform_grid: need at least 2 points");
    std::vector<double> ts(points);
    for (std::size_t j = 0; j < points; ++j)
        ts[j] = static_cast<double>(j) / static_cast<double>(points - 1);
    ts.front() = 0.0;
    ts.back() = 1.0;
    return ts;
}

struct InterpolationCurve {
    std::vector<double> ts;
    std::vector<double> losses;
    std::vector<double> accuracies;  // empty when not tracked

    bool has_accuracy() const { return !accuracies.empty(); }

    void validate() const {
        if (ts.size() != losses.size() || ts.size() < 2)
            throw std::invalid_argument("curve: grid/loss lengths inconsistent");
        if (!accuracies.empty() && accuracies.size() != ts.size())
            throw std::invalid_argument("curve: accuracy length inconsistent");
        if (ts.front() != 0.0 || ts.back() != 1.0)
            throw std::invalid_argument("curve: grid must span [0, 1]");
        for (std::size_t j = 0; j + 1 < ts.size(); ++j)
            if (ts[j + 1] <= ts[j])
                throw std::invalid_argument("curve: grid not strictly increasing");
    }
};

/// Parameter-space lerp; t = 1 gives phi_a, t = 0 gives phi_b.
inline MoEParams interpolate_params(const MoEParams& phi_a, const MoEParams& phi_b, double t) {
    if (phi_a.config != phi_b.config)
        throw std::invalid_argument("interpolate_params: config mismatch");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("interpolate_params: t outside [0, 1]");
    if (t == 1.0) return phi_a;
    if (t == 0.0) return phi_b;
    // b + t*(a-b) rather than t*a + (1-t)*b: identical parameters stay
    // bitwise identical at every t.
    auto lerp = [&](std::span<const double> a, std::span<const double> b, std::span<double> out) {
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = b[k] + t * (a[k] - b[k]);
    };
    MoEParams out;
    out.config = phi_a.config;
    out.gates.resize(phi_a.gates.size());
    for (std::size_t i = 0; i < out.gates.size(); ++i) {
        out.gates[i].W.resize(phi_a.gates[i].W.size());
        lerp(phi_a.gates[i].W, phi_b.gates[i].W, out.gates[i].W);
        out.gates[i].b = phi_b.gates[i].b + t * (phi_a.gates[i].b - phi_b.gates[i].b);
    }
    out.experts.resize(phi_a.experts.size());
    for (std::size_t i = 0; i < out.experts.size(); ++i) {
        const ExpertParams& ea = phi_a.experts[i];
        const ExpertParams& eb = phi_b.experts[i];
        ExpertParams& eo = out.experts[i];
        eo.A = Matrix(ea.A.rows, ea.A.cols);
        eo.B = Matrix(ea.B.rows, ea.B.cols);
        eo.u.resize(ea.u.size());
        eo.v.resize(ea.v.size());
        lerp(ea.A.data, eb.A.data, eo.A.data);
        lerp(ea.u, eb.u, eo.u);
        lerp(ea.B.data, eb.B.data, eo.B.data);
        lerp(ea.v, eb.v, eo.v);
    }
    return out;
}

/// Losses (and optionally accuracies) along the interpolation path. Grid
/// points are independent and evaluated in parallel.
inline InterpolationCurve eval_curve(const MoEParams& phi_a, const MoEParams& phi_b,
                                     const LossFn& loss, std::span<const double> grid,
                                     const MetricFn& accuracy = nullptr) {
    InterpolationCurve curve;
    curve.ts.assign(grid.begin(), grid.end());
    curve.losses.resize(grid.size());
    if (accuracy) curve.accuracies.resize(grid.size());
    parallel_for(grid.size(), [&](std::size_t j) {
        const MoEParams point = interpolate_params(phi_a, phi_b, grid[j]);
        curve.losses[j] = loss(point);
        if (accuracy) curve.accuracies[j] = accuracy(point);
    });
    curve.validate();
    return curve;
}

/// Max over the grid of loss minus the endpoint chord; the grid max stands
/// in for the sup over [0, 1].
inline double loss_barrier(const InterpolationCurve& curve, double loss_a, double loss_b) {
    curve.validate();
    double barrier = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < curve.ts.size(); ++j) {
        const double chord = loss_b + curve.ts[j] * (loss_a - loss_b);
        barrier = std::max(barrier, curve.losses[j] - chord);
    }
    return barrier;
}

/// Signed area between the loss curve and the endpoint chord.
inline double metric_auc(const InterpolationCurve& curve, double loss_a, double loss_b) {
    curve.validate();
    std::vector<double> excess(curve.ts.size());
    for (std::size_t j = 0; j < curve.ts.size(); ++j) {
        const double chord = loss_b + curve.ts[j] * (loss_a - loss_b);
        excess[j] = curve.losses[j] - chord;
    }
    return trapezoid_integral(curve.ts, excess);
}

/// Accuracy barrier with the sign flipped relative to loss: a dip below
/// the chord counts as a positive barrier.
inline double accuracy_barrier(const InterpolationCurve& curve, double acc_a, double acc_b) {
    curve.validate();
    if (!curve.has_accuracy())
        throw std::invalid_argument("accuracy_barrier: curve has no accuracies");
    double barrier = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < curve.ts.size(); ++j) {
        const double chord = acc_b + curve.ts[j] * (acc_a - acc_b);
        barrier = std::max(barrier, chord - curve.accuracies[j]);
    }
    return barrier;
}

/// Signed area of the accuracy dip below the chord (same orientation as
/// accuracy_barrier).
inline double accuracy_auc(const InterpolationCurve& curve, double acc_a, double acc_b) {
    curve.validate();
    if (!curve.has_accuracy())
        throw std::invalid_argument("accuracy_auc: curve has no accuracies");
    std::vector<double> dip(curve.ts.size());
    for (std::size_t j = 0; j < curve.ts.size(); ++j) {
        const double chord = acc_b + curve.ts[j] * (acc_a - acc_b);
        dip[j] = chord - curve.accuracies[j];
    }
    return trapezoid_integral(curve.ts, dip);
}

struct BarrierReport {
    InterpolationCurve curve;
    double loss_a = 0.0;  // endpoint at t = 1
    double loss_b = 0.0;  // endpoint at t = 0
    double loss_barrier = 0.0;
    double loss_auc = 0.0;
    std::optional<double> acc_a;
    std::optional<double> acc_b;
    std::optional<double> acc_barrier;
    std::optional<double> acc_auc;
};

inline BarrierReport make_barrier_report(const MoEParams& phi_a, const MoEParams& phi_b,
                                         const LossFn& loss, std::span<const double> grid,
                                         const MetricFn& accuracy = nullptr) {
    BarrierReport report;
    report.curve = eval_curve(phi_a, phi_b, loss, grid, accuracy);
    report.loss_a = report.curve.losses.back();
    report.loss_b = report.curve.losses.front();
    report.loss_barrier = loss_barrier(report.curve, report.loss_a, report.loss_b);
    report.loss_auc = metric_auc(report.curve, report.loss_a, report.loss_b);
    if (report.curve.has_accuracy()) {
        report.acc_a = report.curve.accuracies.back();
        report.acc_b = report.curve.accuracies.front();
        report.acc_barrier = accuracy_barrier(report.curve, *report.acc_a, *report.acc_b);
        report.acc_auc = accuracy_auc(report.curve, *report.acc_a, *report.acc_b);
    }
    return report;
}

struct RankReport {
    std::vector<Permutation> permutations;  // lexicographic enumeration order
    std::vector<double> barriers;           // post neuron-matching barrier per permutation
    Permutation chosen_tau;
    std::size_t rank = 0;  // 1 + number of strictly smaller barriers
    double l_method = 0.0;
    double l_top1 = 0.0;
    double l_naive = 0.0;
    double l_hat = 0.0;
};

namespace detail {

inline double barrier_for_reordering(const MoEParams& phi_a, const MoEParams& phi_b,
                                     const Permutation& tau, const LossFn& loss,
                                     std::span<const double> grid) {
    AlignmentResult alignment;
    alignment.tau = tau;
    alignment.hidden.perms.resize(phi_a.config.n);
    for (std::size_t i = 0; i < phi_a.config.n; ++i)
        alignment.hidden.perms[i] = expert_neuron_match(phi_a.experts[i], phi_b.experts[tau[i]]);
    const MoEParams aligned = apply_alignment(phi_b, alignment);
    const InterpolationCurve curve = eval_curve(phi_a, aligned, loss, grid);
    return loss_barrier(curve, curve.losses.back(), curve.losses.front());
}

}  // namespace detail

/// Exhaustive expert-permutation sweep: every reordering of phi_b is
/// neuron-matched and its barrier against phi_a recorded. l_naive is the
/// plain interpolation barrier with no reordering and no neuron matching.
inline RankReport brute_force_best_permutation(const MoEParams& phi_a, const MoEParams& phi_b,
                                               const LossFn& loss, std::span<const double> grid,
                                               const Permutation& chosen_tau) {
    if (phi_a.config != phi_b.config)
        throw std::invalid_argument("brute_force: config mismatch");
    const std::size_t n = phi_a.config.n;
    const std::size_t n_s =
        phi_a.config.variant == GatingVariant::Shared ? phi_a.config.n_shared : 0;
    const std::size_t movable = n - n_s;
    if (movable > 8)
        throw std::invalid_argument(
            "brute_force: more than 8 permutable experts; enumeration is factorial, sample instead");
    if (chosen_tau.size() != n || !is_permutation(chosen_tau))
        throw std::invalid_argument("brute_force: chosen_tau is not a permutation of the experts");

    RankReport report;
    Permutation routed = identity_permutation(movable);
    do {
        Permutation tau = identity_permutation(n);
        for (std::size_t i = 0; i < movable; ++i) tau[n_s + i] = n_s + routed[i];
        report.permutations.push_back(std::move(tau));
    } while (std::next_permutation(routed.begin(), routed.end()));

    report.barriers.resize(report.permutations.size());
    parallel_for(report.permutations.size(), [&](std::size_t p) {
        report.barriers[p] =
            detail::barrier_for_reordering(phi_a, phi_b, report.permutations[p], loss, grid);
    });

    const InterpolationCurve naive_curve = eval_curve(phi_a, phi_b, loss, grid);
    report.l_naive = loss_barrier(naive_curve, naive_curve.losses.back(), naive_curve.losses.front());
    report.l_top1 = *std::min_element(report.barriers.begin(), report.barriers.end());

    const auto it = std::find(report.permutations.begin(), report.permutations.end(), chosen_tau);
    if (it == report.permutations.end())
        throw std::invalid_argument("brute_force: chosen_tau moves a fixed expert");
    report.chosen_tau = chosen_tau;
    report.l_method =
        report.barriers[static_cast<std::size_t>(it - report.permutations.begin())];
    report.rank = 1;
    for (double b : report.barriers)
        if (b < report.l_method) ++report.rank;

    const double denom = report.l_naive - report.l_top1;
    const double numer = report.l_method - report.l_top1;
    if (std::abs(denom) <= 1e-12) {
        // Degenerate normalization (naive already optimal); report 0 when the
        // method matched the optimum, else fall through to the raw formula.
        report.l_hat = std::abs(numer) <= 1e-12 ? 0.0 : numer / denom * 100.0;
    } else {
        report.l_hat = numer / denom * 100.0;
    }
    return report;
}

struct RatioReport {
    std::optional<double> loss_barrier_ratio;
    std::optional<double> loss_auc_ratio;
    std::optional<double> acc_barrier_ratio;
    std::optional<double> acc_auc_ratio;
};

/// Aligned-over-naive metric ratios scaled by 100; absent whenever the
/// naive metric is too small to divide by.
inline RatioReport ratio_report(const BarrierReport& aligned, const BarrierReport& naive) {
    if (aligned.curve.ts != naive.curve.ts)
        throw std::invalid_argument("ratio_report: reports use different grids");
    auto ratio = [](double num, double den) -> std::optional<double> {
        if (std::abs(den) <= 1e-12) return std::nullopt;
        return num / den * 100.0;
    };
    RatioReport out;
    out.loss_barrier_ratio = ratio(aligned.loss_barrier, naive.loss_barrier);
    out.loss_auc_ratio = ratio(aligned.loss_auc, naive.loss_auc);
    if (aligned.acc_barrier && naive.acc_barrier)
        out.acc_barrier_ratio = ratio(*aligned.acc_barrier, *naive.acc_barrier);
    if (aligned.acc_auc && naive.acc_auc)
        out.acc_auc_ratio = ratio(*aligned.acc_auc, *naive.acc_auc);
    return out;
}

}  // namespace rebasin
