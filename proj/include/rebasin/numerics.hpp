// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace rebasin {

/// Dense row-major matrix of 64-bit floats. All core arithmetic in this
/// project is f64; the invariance tolerances rely on it.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> d)
        : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != rows * cols) {
            throw std::invalid_argument("matrix: data length does not match rows*cols");
        }
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<const double> row(std::size_t i) const {
        return std::span<const double>(data).subspan(i * cols, cols);
    }

    bool same_shape(const Matrix& other) const {
        return rows == other.rows && cols == other.cols;
    }
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) {
                out(i, j) += aik * b(k, j);
            }
        }
    }
    return out;
}

inline std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
    if (m.cols != x.size()) throw std::invalid_argument("matvec: dimension mismatch");
    std::vector<double> out(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double acc = 0.0;
        const double* row = m.data.data() + i * m.cols;
        for (std::size_t j = 0; j < m.cols; ++j) acc += row[j] * x[j];
        out[i] = acc;
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out(j, i) = m(i, j);
    return out;
}

inline double frobenius_norm_sq(const Matrix& m) {
    double acc = 0.0;
    for (double x : m.data) acc += x * x;
    return acc;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: length mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs(std::span<const double> a) {
    double m = 0.0;
    for (double x : a) m = std::max(m, std::abs(x));
    return m;
}

inline bool all_finite(std::span<const double> a) {
    return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

/// Max-subtracted softmax. Gate scores can grow during training, so the
/// shift is applied unconditionally.
inline std::vector<double> stable_softmax(std::span<const double> z) {
    if (z.empty()) throw std::invalid_argument("empty softmax");
    const double zmax = *std::max_element(z.begin(), z.end());
    std::vector<double> out(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - zmax);
        sum += out[i];
    }
    for (double& p : out) p /= sum;
    return out;
}

inline std::vector<double> relu(std::span<const double> x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return out;
}

/// Trapezoid rule on a strictly increasing grid spanning [0, 1].
inline double trapezoid_integral(std::span<const double> ts, std::span<const double> ys) {
    if (ts.size() != ys.size() || ts.size() < 2)
        throw std::invalid_argument("trapezoid: need matching grids of length >= 2");
    if (ts.front() != 0.0 || ts.back() != 1.0)
        throw std::invalid_argument("trapezoid: grid must span [0, 1]");
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        const double dt = ts[i + 1] - ts[i];
        if (dt <= 0.0) throw std::invalid_argument("trapezoid: grid not strictly increasing");
        acc += 0.5 * (ys[i] + ys[i + 1]) * dt;
    }
    return acc;
}

/// Counter-based random stream: draw j is splitmix64 applied to
/// seed + j*0x9e3779b97f4a7c15. Normal variates come from Box-Muller on two
/// consecutive uniforms (cosine branch only), so the whole sequence is a
/// pure function of (seed, counter) and identical on every platform that
/// rounds libm the same way.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller; consumes exactly two draws.
    double next_normal() {
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer in [0, bound). Modulo bias is immaterial at the
    /// bounds used here (experts, hidden units, batch indices).
    std::uint64_t next_below(std::uint64_t bound) {
        if (bound == 0) throw std::invalid_argument("next_below: bound must be positive");
        return next_u64() % bound;
    }

    std::vector<double> normal_vector(std::size_t n, double scale = 1.0) {
        std::vector<double> out(n);
        for (double& x : out) x = scale * next_normal();
        return out;
    }

    Matrix normal_matrix(std::size_t rows, std::size_t cols, double scale = 1.0) {
        Matrix out(rows, cols);
        for (double& x : out.data) x = scale * next_normal();
        return out;
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

}  // namespace rebasin
