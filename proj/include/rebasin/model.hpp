// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rebasin/numerics.hpp"

namespace rebasin {

enum class GatingVariant { Dense, Sparse, Shared };

inline std::string variant_name(GatingVariant v) {
    switch (v) {
        case GatingVariant::Dense: return "dense";
        case GatingVariant::Sparse: return "sparse";
        case GatingVariant::Shared: return "shared";
    }
    throw std::logic_error("unknown gating variant");
}

inline GatingVariant variant_from_name(const std::string& s) {
    if (s == "dense") return GatingVariant::Dense;
    if (s == "sparse") return GatingVariant::Sparse;
    if (s == "shared") return GatingVariant::Shared;
    throw std::invalid_argument("unknown gating variant: " + s);
}

struct MoEConfig {
    GatingVariant variant = GatingVariant::Dense;
    std::size_t n = 0;  // total experts (shared + routed for the Shared variant)
    std::size_t d = 0;  // input/output dimension
    std::size_t h = 0;  // expert hidden width
    std::size_t top_k = 0;         // Sparse only
    std::size_t n_shared = 0;      // Shared only
    std::size_t top_k_routed = 0;  // Shared only

    std::size_t n_routed() const { return n - n_shared; }

    /// Number of gate entries stored: shared experts carry no gate.
    std::size_t gate_count() const {
        return variant == GatingVariant::Shared ? n_routed() : n;
    }

    void validate() const {
        if (n < 1 || d < 1 || h < 1)
            throw std::invalid_argument("config: n, d, h must be positive");
        switch (variant) {
            case GatingVariant::Dense:
                break;
            case GatingVariant::Sparse:
                if (top_k < 1 || top_k > n)
                    throw std::invalid_argument("config: sparse top_k out of range");
                break;
            case GatingVariant::Shared:
                if (n_shared < 1 || n_shared >= n)
                    throw std::invalid_argument("config: shared variant needs n_shared >= 1 and n_routed >= 1");
                if (top_k_routed < 1 || top_k_routed > n_routed())
                    throw std::invalid_argument("config: top_k_routed out of range");
                break;
        }
    }

    bool operator==(const MoEConfig&) const = default;
};

struct GateEntry {
    std::vector<double> W;  // length d
    double b = 0.0;
};

/// One-hidden-layer ReLU expert: x -> B*relu(A*x + u) + v.
struct ExpertParams {
    Matrix A;               // h x d
    std::vector<double> u;  // h
    Matrix B;               // d x h
    std::vector<double> v;  // d

    std::size_t hidden_dim() const { return A.rows; }
    std::size_t io_dim() const { return A.cols; }

    void validate() const {
        if (A.rows < 1 || A.cols < 1) throw std::invalid_argument("expert: empty A");
        if (u.size() != A.rows) throw std::invalid_argument("expert: u length != hidden dim");
        if (B.rows != A.cols || B.cols != A.rows)
            throw std::invalid_argument("expert: B shape must be d x h");
        if (v.size() != B.rows) throw std::invalid_argument("expert: v length != d");
    }
};

struct MoEParams {
    MoEConfig config;
    std::vector<GateEntry> gates;      // length gate_count()
    std::vector<ExpertParams> experts; // length n; for Shared, first n_shared are shared

    void validate() const {
        config.validate();
        if (experts.size() != config.n)
            throw std::invalid_argument("params: expert count != config.n");
        if (gates.size() != config.gate_count())
            throw std::invalid_argument("params: gate count does not match variant");
        for (const auto& g : gates) {
            if (g.W.size() != config.d)
                throw std::invalid_argument("params: gate width != d");
        }
        for (const auto& e : experts) {
            e.validate();
            if (e.io_dim() != config.d || e.hidden_dim() != config.h)
                throw std::invalid_argument("params: expert does not share (d, h)");
        }
    }
};

inline std::vector<double> expert_forward(std::span<const double> x, const ExpertParams& theta) {
    if (x.size() != theta.io_dim()) throw std::invalid_argument("expert_forward: input dim mismatch");
    std::vector<double> z = matvec(theta.A, x);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += theta.u[i];
    const std::vector<double> hval = relu(z);
    std::vector<double> out = matvec(theta.B, hval);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += theta.v[i];
    return out;
}

inline std::vector<double> gate_scores(std::span<const double> x, std::span<const GateEntry> gates) {
    std::vector<double> scores(gates.size());
    for (std::size_t i = 0; i < gates.size(); ++i) {
        scores[i] = dot(gates[i].W, x) + gates[i].b;
    }
    return scores;
}

/// Indices of the k largest entries, ascending. Ties prefer the smaller index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> z, std::size_t k) {
    if (k < 1 || k > z.size()) throw std::invalid_argument("top_k: k out of range");
    std::vector<std::size_t> order(z.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (z[a] != z[b]) return z[a] > z[b];
        return a < b;
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

namespace detail {
inline void check_variant(const MoEParams& phi, GatingVariant expected, const char* op) {
    if (phi.config.variant != expected)
        throw std::invalid_argument(std::string(op) + ": wrong gating variant");
}
}  // namespace detail

inline std::vector<double> dense_forward(std::span<const double> x, const MoEParams& phi) {
    detail::check_variant(phi, GatingVariant::Dense, "dense_forward");
    const std::vector<double> weights = stable_softmax(gate_scores(x, phi.gates));
    std::vector<double> out(phi.config.d, 0.0);
    for (std::size_t i = 0; i < phi.config.n; ++i) {
        const std::vector<double> e = expert_forward(x, phi.experts[i]);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += weights[i] * e[j];
    }
    return out;
}

/// Top-k routing: restrict scores to the selected set, softmax over the
/// restriction, weighted sum of the selected experts only.
inline std::vector<double> sparse_forward(std::span<const double> x, const MoEParams& phi) {
    detail::check_variant(phi, GatingVariant::Sparse, "sparse_forward");
    const std::vector<double> scores = gate_scores(x, phi.gates);
    const std::vector<std::size_t> selected = top_k_indices(scores, phi.config.top_k);
    std::vector<double> restricted(selected.size());
    for (std::size_t i = 0; i < selected.size(); ++i) restricted[i] = scores[selected[i]];
    const std::vector<double> weights = stable_softmax(restricted);
    std::vector<double> out(phi.config.d, 0.0);
    for (std::size_t i = 0; i < selected.size(); ++i) {
        const std::vector<double> e = expert_forward(x, phi.experts[selected[i]]);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += weights[i] * e[j];
    }
    return out;
}

/// Shared + routed experts: every shared expert contributes unweighted; the
/// routed gate is softmax over all routed scores, then masked to the top
/// k_r entries without renormalization.
inline std::vector<double> shared_forward(std::span<const double> x, const MoEParams& phi) {
    detail::check_variant(phi, GatingVariant::Shared, "shared_forward");
    const std::size_t n_s = phi.config.n_shared;
    std::vector<double> out(phi.config.d, 0.0);
    for (std::size_t i = 0; i < n_s; ++i) {
        const std::vector<double> e = expert_forward(x, phi.experts[i]);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += e[j];
    }
    const std::vector<double> probs = stable_softmax(gate_scores(x, phi.gates));
    const std::vector<std::size_t> selected = top_k_indices(probs, phi.config.top_k_routed);
    for (std::size_t idx : selected) {
        const std::vector<double> e = expert_forward(x, phi.experts[n_s + idx]);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += probs[idx] * e[j];
    }
    return out;
}

inline std::vector<double> moe_forward(std::span<const double> x, const MoEParams& phi) {
    switch (phi.config.variant) {
        case GatingVariant::Dense: return dense_forward(x, phi);
        case GatingVariant::Sparse: return sparse_forward(x, phi);
        case GatingVariant::Shared: return shared_forward(x, phi);
    }
    throw std::logic_error("unknown gating variant");
}

/// Smallest pairwise gap between gating scores at x.
inline double omega_margin(std::span<const double> x, std::span<const GateEntry> gates) {
    const std::vector<double> scores = gate_scores(x, gates);
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < scores.size(); ++i)
        for (std::size_t j = i + 1; j < scores.size(); ++j)
            margin = std::min(margin, std::abs(scores[i] - scores[j]));
    return margin;
}

/// Membership in the set of inputs whose gating scores are pairwise
/// distinct, with an explicit gap tolerance (0 = strict inequality).
inline bool in_omega(std::span<const double> x, std::span<const GateEntry> gates,
                     double epsilon = 0.0) {
    if (gates.empty()) throw std::invalid_argument("in_omega: no gates");
    if (gates.size() == 1) return true;
    return omega_margin(x, gates) > epsilon;
}

}  // namespace rebasin
