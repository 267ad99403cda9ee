// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "rebasin/model.hpp"
#include "rebasin/numerics.hpp"

namespace rebasin::testing {

/// Random model with all arrays (biases included) drawn from the stream.
inline MoEParams make_random_params(const MoEConfig& config, RngStream& rng, double scale = 1.0) {
    config.validate();
    MoEParams phi;
    phi.config = config;
    phi.gates.resize(config.gate_count());
    for (auto& g : phi.gates) {
        g.W = rng.normal_vector(config.d, scale);
        g.b = scale * rng.next_normal();
    }
    phi.experts.resize(config.n);
    for (auto& e : phi.experts) {
        e.A = rng.normal_matrix(config.h, config.d, scale);
        e.u = rng.normal_vector(config.h, scale);
        e.B = rng.normal_matrix(config.d, config.h, scale);
        e.v = rng.normal_vector(config.d, scale);
    }
    return phi;
}

inline MoEConfig dense_config(std::size_t n, std::size_t d, std::size_t h) {
    return MoEConfig{GatingVariant::Dense, n, d, h, 0, 0, 0};
}

inline MoEConfig sparse_config(std::size_t n, std::size_t d, std::size_t h, std::size_t k) {
    return MoEConfig{GatingVariant::Sparse, n, d, h, k, 0, 0};
}

inline MoEConfig shared_config(std::size_t n_shared, std::size_t n_routed, std::size_t d,
                               std::size_t h, std::size_t k_routed) {
    return MoEConfig{GatingVariant::Shared, n_shared + n_routed, d, h, 0, n_shared, k_routed};
}

}  // namespace rebasin::testing
