// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "rebasin/model.hpp"
#include "rebasin/numerics.hpp"

namespace rebasin {

using Permutation = std::vector<std::size_t>;

inline bool is_permutation(std::span<const std::size_t> p) {
    std::vector<bool> seen(p.size(), false);
    for (std::size_t v : p) {
        if (v >= p.size() || seen[v]) return false;
        seen[v] = true;
    }
    return true;
}

inline Permutation identity_permutation(std::size_t n) {
    Permutation p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    return p;
}

inline Permutation inverse_permutation(std::span<const std::size_t> p) {
    Permutation inv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
    return inv;
}

/// compose(p, q)[i] = p[q[i]].
inline Permutation compose_permutations(std::span<const std::size_t> p,
                                        std::span<const std::size_t> q) {
    if (p.size() != q.size()) throw std::invalid_argument("compose: size mismatch");
    Permutation out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[q[i]];
    return out;
}

/// Fisher-Yates on the stream; the draw order is part of the determinism
/// contract. Entries below n_fixed stay in place.
inline Permutation random_permutation(std::size_t n, RngStream& rng, std::size_t n_fixed = 0) {
    Permutation p = identity_permutation(n);
    if (n_fixed >= n) return p;
    for (std::size_t i = n - 1; i > n_fixed; --i) {
        const std::size_t j = n_fixed + rng.next_below(i - n_fixed + 1);
        std::swap(p[i], p[j]);
    }
    return p;
}

/// Element of the gate-translation + expert-permutation group: entry i of
/// the transformed model reads from entry tau[i] of the original, with
/// (c_W, c_b) added to every gate.
struct GroupElement {
    std::vector<double> c_W;  // length d
    double c_b = 0.0;
    Permutation tau;          // permutation of {0..n-1}

    void validate(std::size_t n, std::size_t d) const {
        if (tau.size() != n) throw std::invalid_argument("group element: tau size != n");
        if (!is_permutation(tau)) throw std::invalid_argument("group element: tau not a bijection");
        if (c_W.size() != d) throw std::invalid_argument("group element: c_W length != d");
    }
};

inline GroupElement identity_group_element(std::size_t n, std::size_t d) {
    return GroupElement{std::vector<double>(d, 0.0), 0.0, identity_permutation(n)};
}

/// Element equivalent to applying `first` and then `second`.
inline GroupElement compose(const GroupElement& first, const GroupElement& second) {
    if (first.tau.size() != second.tau.size() || first.c_W.size() != second.c_W.size())
        throw std::invalid_argument("compose: group element size mismatch");
    GroupElement out;
    out.tau = compose_permutations(first.tau, second.tau);
    out.c_W.resize(first.c_W.size());
    for (std::size_t i = 0; i < out.c_W.size(); ++i) out.c_W[i] = first.c_W[i] + second.c_W[i];
    out.c_b = first.c_b + second.c_b;
    return out;
}

inline GroupElement inverse(const GroupElement& g) {
    GroupElement out;
    out.tau = inverse_permutation(g.tau);
    out.c_W.resize(g.c_W.size());
    for (std::size_t i = 0; i < g.c_W.size(); ++i) out.c_W[i] = -g.c_W[i];
    out.c_b = -g.c_b;
    return out;
}

/// Per-expert hidden-unit permutations; perms[i] acts on expert i.
struct HiddenPerms {
    std::vector<Permutation> perms;

    void validate(std::size_t n, std::size_t h) const {
        if (perms.size() != n) throw std::invalid_argument("hidden perms: count != n");
        for (const auto& p : perms) {
            if (p.size() != h) throw std::invalid_argument("hidden perms: length != h");
            if (!is_permutation(p)) throw std::invalid_argument("hidden perms: not a bijection");
        }
    }

    bool all_identity() const {
        for (const auto& p : perms)
            for (std::size_t i = 0; i < p.size(); ++i)
                if (p[i] != i) return false;
        return true;
    }
};

inline HiddenPerms identity_hidden_perms(std::size_t n, std::size_t h) {
    return HiddenPerms{std::vector<Permutation>(n, identity_permutation(h))};
}

inline HiddenPerms random_hidden_perms(std::size_t n, std::size_t h, RngStream& rng) {
    HiddenPerms hp;
    hp.perms.reserve(n);
    for (std::size_t i = 0; i < n; ++i) hp.perms.push_back(random_permutation(h, rng));
    return hp;
}

/// Permute an expert's hidden units: row r of the result is row perm[r] of
/// the input for A and u, column r is column perm[r] for B. The output
/// bias is untouched, and the expert function is unchanged.
inline ExpertParams apply_hidden_perm(const ExpertParams& theta, std::span<const std::size_t> perm) {
    if (perm.size() != theta.hidden_dim())
        throw std::invalid_argument("apply_hidden_perm: perm length != h");
    const std::size_t h = theta.hidden_dim();
    const std::size_t d = theta.io_dim();
    ExpertParams out;
    out.A = Matrix(h, d);
    out.u.resize(h);
    out.B = Matrix(d, h);
    out.v = theta.v;
    for (std::size_t r = 0; r < h; ++r) {
        const std::size_t src = perm[r];
        for (std::size_t c = 0; c < d; ++c) out.A(r, c) = theta.A(src, c);
        out.u[r] = theta.u[src];
        for (std::size_t c = 0; c < d; ++c) out.B(c, r) = theta.B(c, src);
    }
    return out;
}

/// Transformed model: entry i becomes (W_{tau(i)} + c_W, b_{tau(i)} + c_b,
/// theta_{tau(i)}). For the Shared variant tau must fix the shared prefix,
/// and the translation acts on routed gates only.
inline MoEParams apply_group(const MoEParams& phi, const GroupElement& g) {
    g.validate(phi.config.n, phi.config.d);
    const std::size_t n_s = phi.config.variant == GatingVariant::Shared ? phi.config.n_shared : 0;
    for (std::size_t i = 0; i < n_s; ++i) {
        if (g.tau[i] != i)
            throw std::invalid_argument("apply_group: tau must fix shared experts");
    }
    MoEParams out;
    out.config = phi.config;
    out.experts.resize(phi.config.n);
    for (std::size_t i = 0; i < phi.config.n; ++i) out.experts[i] = phi.experts[g.tau[i]];
    out.gates.resize(phi.gates.size());
    for (std::size_t i = n_s; i < phi.config.n; ++i) {
        const GateEntry& src = phi.gates[g.tau[i] - n_s];
        GateEntry& dst = out.gates[i - n_s];
        dst.W.resize(src.W.size());
        for (std::size_t j = 0; j < src.W.size(); ++j) dst.W[j] = src.W[j] + g.c_W[j];
        dst.b = src.b + g.c_b;
    }
    return out;
}

inline MoEParams apply_hidden_perms(const MoEParams& phi, const HiddenPerms& hp) {
    hp.validate(phi.config.n, phi.config.h);
    MoEParams out;
    out.config = phi.config;
    out.gates = phi.gates;
    out.experts.reserve(phi.config.n);
    for (std::size_t i = 0; i < phi.config.n; ++i)
        out.experts.push_back(apply_hidden_perm(phi.experts[i], hp.perms[i]));
    return out;
}

/// Uniform random tau (fixing the first n_fixed entries) plus Gaussian
/// translation scaled by translation_scale.
inline GroupElement random_group_element(std::size_t n, std::size_t d, RngStream& rng,
                                         double translation_scale, std::size_t n_fixed = 0) {
    if (n < 1) throw std::invalid_argument("random_group_element: n must be positive");
    GroupElement g;
    g.tau = random_permutation(n, rng, n_fixed);
    g.c_W = rng.normal_vector(d, translation_scale);
    g.c_b = translation_scale * rng.next_normal();
    return g;
}

struct PlantedEquivalent {
    MoEParams params;   // functionally equal to the source model
    GroupElement g;     // the planted group element
    HiddenPerms hidden; // the planted per-expert hidden permutations
};

/// Functionally equivalent copy built from a random group element and
/// random hidden permutations; the planted pieces are returned as ground
/// truth for recovery tests.
inline PlantedEquivalent plant_equivalent(const MoEParams& phi, RngStream& rng,
                                          double translation_scale) {
    phi.validate();
    const std::size_t n_fixed =
        phi.config.variant == GatingVariant::Shared ? phi.config.n_shared : 0;
    PlantedEquivalent out;
    out.g = random_group_element(phi.config.n, phi.config.d, rng, translation_scale, n_fixed);
    out.hidden = random_hidden_perms(phi.config.n, phi.config.h, rng);
    out.params = apply_hidden_perms(apply_group(phi, out.g), out.hidden);
    return out;
}

}  // namespace rebasin
