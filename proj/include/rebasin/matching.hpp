// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "rebasin/model.hpp"
#include "rebasin/numerics.hpp"
#include "rebasin/symmetry.hpp"

namespace rebasin {

enum class MatchMethod { GateWeights, ExpertGram };

inline std::string method_name(MatchMethod m) {
    return m == MatchMethod::GateWeights ? "gate" : "gram";
}

inline MatchMethod method_from_name(const std::string& s) {
    if (s == "gate") return MatchMethod::GateWeights;
    if (s == "gram") return MatchMethod::ExpertGram;
    throw std::invalid_argument("unknown matching method: " + s);
}

/// Expert permutation plus per-pair hidden permutations. Applying the
/// result to the second model (tau first, then the hidden permutations)
/// yields the aligned model.
struct AlignmentResult {
    Permutation tau;
    HiddenPerms hidden;
    MatchMethod method = MatchMethod::GateWeights;
};

/// Subtract the across-expert mean from every gate weight and bias, which
/// removes any common translation.
inline std::vector<GateEntry> center_gates(std::span<const GateEntry> gates) {
    if (gates.empty()) throw std::invalid_argument("center_gates: no gates");
    const std::size_t d = gates[0].W.size();
    std::vector<double> mean_w(d, 0.0);
    double mean_b = 0.0;
    for (const auto& g : gates) {
        if (g.W.size() != d) throw std::invalid_argument("center_gates: ragged gate widths");
        for (std::size_t j = 0; j < d; ++j) mean_w[j] += g.W[j];
        mean_b += g.b;
    }
    const double inv_n = 1.0 / static_cast<double>(gates.size());
    for (double& m : mean_w) m *= inv_n;
    mean_b *= inv_n;
    std::vector<GateEntry> out(gates.begin(), gates.end());
    for (auto& g : out) {
        for (std::size_t j = 0; j < d; ++j) g.W[j] -= mean_w[j];
        g.b -= mean_b;
    }
    return out;
}

/// C[i][j] = Euclidean distance between centered gate i of A and centered
/// gate j of B (weights and bias jointly).
inline Matrix gate_cost_matrix(std::span<const GateEntry> gates_a,
                               std::span<const GateEntry> gates_b) {
    if (gates_a.size() != gates_b.size())
        throw std::invalid_argument("gate_cost_matrix: gate counts differ");
    if (!gates_a.empty() && gates_a[0].W.size() != gates_b[0].W.size())
        throw std::invalid_argument("gate_cost_matrix: gate widths differ");
    const std::vector<GateEntry> ca = center_gates(gates_a);
    const std::vector<GateEntry> cb = center_gates(gates_b);
    const std::size_t n = ca.size();
    Matrix cost(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < ca[i].W.size(); ++k) {
                const double diff = ca[i].W[k] - cb[j].W[k];
                acc += diff * diff;
            }
            const double db = ca[i].b - cb[j].b;
            cost(i, j) = std::sqrt(acc + db * db);
        }
    }
    return cost;
}

namespace detail {

/// Gram of the input-side augmented weights [A | u]: a (d+1) x (d+1)
/// matrix invariant under hidden-unit permutations.
inline Matrix input_gram(const ExpertParams& e) {
    const std::size_t h = e.hidden_dim();
    const std::size_t d = e.io_dim();
    Matrix g(d + 1, d + 1);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t i = 0; i <= d; ++i) {
            const double ai = i < d ? e.A(r, i) : e.u[r];
            for (std::size_t j = 0; j <= d; ++j) {
                const double aj = j < d ? e.A(r, j) : e.u[r];
                g(i, j) += ai * aj;
            }
        }
    }
    return g;
}

/// Gram of the output-side augmented weights [B | v]: a d x d matrix,
/// likewise permutation-invariant.
inline Matrix output_gram(const ExpertParams& e) {
    const std::size_t h = e.hidden_dim();
    const std::size_t d = e.io_dim();
    Matrix g(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < h; ++c) acc += e.B(i, c) * e.B(j, c);
            acc += e.v[i] * e.v[j];
            g(i, j) = acc;
        }
    }
    return g;
}

inline double gram_distance(const Matrix& gin_a, const Matrix& gout_a, const Matrix& gin_b,
                            const Matrix& gout_b) {
    double acc = 0.0;
    for (std::size_t k = 0; k < gin_a.data.size(); ++k) {
        const double diff = gin_a.data[k] - gin_b.data[k];
        acc += diff * diff;
    }
    for (std::size_t k = 0; k < gout_a.data.size(); ++k) {
        const double diff = gout_a.data[k] - gout_b.data[k];
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

}  // namespace detail

/// C[i][j] = Frobenius distance between the Gram fingerprints of expert i
/// of A and expert j of B; insensitive to hidden-unit order on both sides.
inline Matrix gram_cost_matrix(std::span<const ExpertParams> experts_a,
                               std::span<const ExpertParams> experts_b) {
    if (experts_a.size() != experts_b.size())
        throw std::invalid_argument("gram_cost_matrix: expert counts differ");
    const std::size_t n = experts_a.size();
    std::vector<Matrix> gin_a(n), gout_a(n), gin_b(n), gout_b(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (experts_a[i].io_dim() != experts_b[i].io_dim() ||
            experts_a[i].hidden_dim() != experts_b[i].hidden_dim())
            throw std::invalid_argument("gram_cost_matrix: expert shapes differ");
        gin_a[i] = detail::input_gram(experts_a[i]);
        gout_a[i] = detail::output_gram(experts_a[i]);
        gin_b[i] = detail::input_gram(experts_b[i]);
        gout_b[i] = detail::output_gram(experts_b[i]);
    }
    Matrix cost(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            cost(i, j) = detail::gram_distance(gin_a[i], gout_a[i], gin_b[j], gout_b[j]);
    return cost;
}

/// Canonical assignment cost: rows summed in ascending order, so equal
/// assignments produce bitwise-equal totals.
inline double assignment_cost(const Matrix& cost, std::span<const std::size_t> tau) {
    if (tau.size() != cost.rows) throw std::invalid_argument("assignment_cost: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < tau.size(); ++i) acc += cost(i, tau[i]);
    return acc;
}

namespace detail {

/// Shortest-augmenting-path Hungarian solver, O(n^3). Returns the
/// row -> column assignment of one optimal solution.
inline Permutation hungarian(const Matrix& cost) {
    const std::size_t n = cost.rows;
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, kInf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = match[j0];
            std::size_t j1 = 0;
            double delta = kInf;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    Permutation assignment(n);
    for (std::size_t j = 1; j <= n; ++j) assignment[match[j] - 1] = j - 1;
    return assignment;
}

/// Optimal value of the LAP restricted to the given rows and columns.
inline double hungarian_value(const Matrix& cost, std::span<const std::size_t> rows,
                              std::span<const std::size_t> cols) {
    const std::size_t m = rows.size();
    if (m == 0) return 0.0;
    Matrix sub(m, m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) sub(i, j) = cost(rows[i], cols[j]);
    const Permutation a = hungarian(sub);
    return assignment_cost(sub, a);
}

}  // namespace detail

struct LapResult {
    Permutation assignment;
    double cost = 0.0;
};

/// Minimum-cost assignment. Among optimal assignments the lexicographically
/// smallest is returned, fixing rows greedily and re-solving the remainder.
inline LapResult solve_lap(const Matrix& cost) {
    if (cost.rows != cost.cols) throw std::invalid_argument("solve_lap: matrix not square");
    if (cost.rows == 0) throw std::invalid_argument("solve_lap: empty matrix");
    if (!all_finite(cost.data)) throw std::invalid_argument("solve_lap: non-finite cost entries");

    const std::size_t n = cost.rows;
    const Permutation base = detail::hungarian(cost);
    const double best = assignment_cost(cost, base);
    // Ties in real inputs are exact (identical sub-costs), so a tiny relative
    // slack suffices to recognize equal-cost completions.
    const double tol = 1e-12 * (1.0 + std::abs(best));

    Permutation chosen(n);
    std::vector<std::size_t> free_cols(n);
    for (std::size_t j = 0; j < n; ++j) free_cols[j] = j;
    std::vector<std::size_t> rest_rows(n);
    for (std::size_t i = 0; i < n; ++i) rest_rows[i] = i;

    double prefix = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        rest_rows.erase(rest_rows.begin());
        bool fixed = false;
        for (std::size_t pos = 0; pos < free_cols.size() && !fixed; ++pos) {
            const std::size_t j = free_cols[pos];
            std::vector<std::size_t> rest_cols = free_cols;
            rest_cols.erase(rest_cols.begin() + static_cast<std::ptrdiff_t>(pos));
            const double completion = detail::hungarian_value(cost, rest_rows, rest_cols);
            if (prefix + cost(i, j) + completion <= best + tol) {
                chosen[i] = j;
                prefix += cost(i, j);
                free_cols = std::move(rest_cols);
                fixed = true;
            }
        }
        if (!fixed) throw std::logic_error("solve_lap: no feasible completion");  // unreachable
    }
    return LapResult{chosen, assignment_cost(cost, chosen)};
}

/// Hidden-unit match between two experts: maximizes the summed inner
/// products of [A|u] rows and B columns over pairings, as one LAP.
/// Applying the returned permutation to theta_b aligns it with theta_a.
inline Permutation expert_neuron_match(const ExpertParams& theta_a, const ExpertParams& theta_b) {
    if (theta_a.io_dim() != theta_b.io_dim() || theta_a.hidden_dim() != theta_b.hidden_dim())
        throw std::invalid_argument("expert_neuron_match: shape mismatch");
    const std::size_t h = theta_a.hidden_dim();
    const std::size_t d = theta_a.io_dim();
    Matrix neg_similarity(h, h);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < h; ++c) {
            double sim = theta_a.u[r] * theta_b.u[c];
            for (std::size_t k = 0; k < d; ++k) sim += theta_a.A(r, k) * theta_b.A(c, k);
            for (std::size_t k = 0; k < d; ++k) sim += theta_a.B(k, r) * theta_b.B(k, c);
            neg_similarity(r, c) = -sim;
        }
    }
    return solve_lap(neg_similarity).assignment;
}

/// Two-stage alignment: order experts by the chosen cost, then match
/// hidden units within every matched pair. For the Shared variant only
/// routed experts are reordered; shared experts pair up by index.
inline AlignmentResult align_moe(const MoEParams& phi_a, const MoEParams& phi_b,
                                 MatchMethod method) {
    if (phi_a.config != phi_b.config) throw std::invalid_argument("align_moe: config mismatch");
    const std::size_t n = phi_a.config.n;
    const std::size_t n_s =
        phi_a.config.variant == GatingVariant::Shared ? phi_a.config.n_shared : 0;

    Matrix cost;
    if (method == MatchMethod::GateWeights) {
        cost = gate_cost_matrix(phi_a.gates, phi_b.gates);
    } else {
        cost = gram_cost_matrix(
            std::span<const ExpertParams>(phi_a.experts).subspan(n_s),
            std::span<const ExpertParams>(phi_b.experts).subspan(n_s));
    }

    AlignmentResult result;
    result.method = method;
    const Permutation routed_tau = solve_lap(cost).assignment;
    result.tau = identity_permutation(n);
    for (std::size_t i = 0; i < routed_tau.size(); ++i) result.tau[n_s + i] = n_s + routed_tau[i];

    result.hidden.perms.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        result.hidden.perms[i] =
            expert_neuron_match(phi_a.experts[i], phi_b.experts[result.tau[i]]);
    }
    return result;
}

/// Build the aligned second model: gate/expert i comes from entry tau[i]
/// of phi_b with hidden permutation i applied.
inline MoEParams apply_alignment(const MoEParams& phi_b, const AlignmentResult& alignment) {
    GroupElement reorder;
    reorder.tau = alignment.tau;
    reorder.c_W.assign(phi_b.config.d, 0.0);
    reorder.c_b = 0.0;
    return apply_hidden_perms(apply_group(phi_b, reorder), alignment.hidden);
}

}  // namespace rebasin
