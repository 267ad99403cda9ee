// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "rebasin/numerics.hpp"

using namespace rebasin;

TEST_CASE("stable_softmax basics") {
    const std::vector<double> sym{0.0, 0.0};
    const auto p = stable_softmax(sym);
    REQUIRE(p[0] == 0.5);
    REQUIRE(p[1] == 0.5);

    for (double c : {-3.0, 0.0, 17.5}) {
        const std::vector<double> single{c};
        const auto q = stable_softmax(single);
        REQUIRE(q.size() == 1);
        REQUIRE(q[0] == 1.0);
    }

    REQUIRE_THROWS_AS(stable_softmax(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("stable_softmax matches the naive definition") {
    // Independent evaluation: plain exp/sum, safe at these magnitudes.
    auto naive = [](const std::vector<double>& z) {
        std::vector<double> out(z.size());
        double sum = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) sum += (out[i] = std::exp(z[i]));
        for (double& x : out) x /= sum;
        return out;
    };

    const std::vector<double> z{std::log(2.0), 0.0};
    const auto p = stable_softmax(z);
    REQUIRE(p[0] == Catch::Approx(2.0 / 3.0).margin(1e-15));
    REQUIRE(p[1] == Catch::Approx(1.0 / 3.0).margin(1e-15));
    const auto q = naive(z);
    REQUIRE(std::abs(p[0] - q[0]) <= 1e-15);
    REQUIRE(std::abs(p[1] - q[1]) <= 1e-15);

    RngStream rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> zr = rng.normal_vector(5, 2.0);
        const auto a = stable_softmax(zr);
        const auto b = naive(zr);
        REQUIRE(max_abs_diff(a, b) <= 1e-14);
        double sum = 0.0;
        for (double x : a) sum += x;
        REQUIRE(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("stable_softmax translation invariance") {
    RngStream rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const std::vector<double> z = rng.normal_vector(6, 3.0);
        const double c = 10.0 * rng.next_normal();
        std::vector<double> shifted = z;
        for (double& x : shifted) x += c;
        REQUIRE(max_abs_diff(stable_softmax(z), stable_softmax(shifted)) <= 1e-14);
    }
}

TEST_CASE("relu") {
    const std::vector<double> x{-1.0, 0.0, 2.0};
    REQUIRE(relu(x) == std::vector<double>{0.0, 0.0, 2.0});

    const std::vector<double> neg{-5.0, -0.25, -1e300};
    REQUIRE(relu(neg) == std::vector<double>(3, 0.0));

    const std::vector<double> nonneg{0.0, 0.5, 3.0};
    REQUIRE(relu(nonneg) == nonneg);
}

TEST_CASE("trapezoid_integral") {
    const std::vector<double> two{0.0, 1.0};
    REQUIRE(trapezoid_integral(two, std::vector<double>{4.0, 4.0}) == 4.0);

    auto ts = std::vector<double>(11);
    for (std::size_t i = 0; i < ts.size(); ++i) ts[i] = static_cast<double>(i) / 10.0;
    ts.front() = 0.0;
    ts.back() = 1.0;
    REQUIRE(trapezoid_integral(ts, ts) == Catch::Approx(0.5).margin(1e-15));

    std::vector<double> ts25(25), sq(25);
    for (std::size_t i = 0; i < 25; ++i) {
        ts25[i] = static_cast<double>(i) / 24.0;
        sq[i] = ts25[i] * ts25[i];
    }
    ts25.back() = 1.0;
    sq.back() = 1.0;
    REQUIRE(std::abs(trapezoid_integral(ts25, sq) - 1.0 / 3.0) <= 1e-3);

    REQUIRE_THROWS_AS(trapezoid_integral(std::vector<double>{0.0, 0.5, 0.5, 1.0},
                                         std::vector<double>{1, 2, 3, 4}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(
        trapezoid_integral(std::vector<double>{0.0, 0.5}, std::vector<double>{1, 2}),
        std::invalid_argument);
}

TEST_CASE("matmul agrees with a naive triple loop") {
    RngStream rng(1234);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix a = rng.normal_matrix(8, 8);
        const Matrix b = rng.normal_matrix(8, 8);
        const Matrix c = matmul(a, b);
        for (std::size_t i = 0; i < 8; ++i) {
            for (std::size_t j = 0; j < 8; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < 8; ++k) acc += a(i, k) * b(k, j);
                REQUIRE(std::abs(c(i, j) - acc) <= 1e-12);
            }
        }
    }
    REQUIRE_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), std::invalid_argument);
}

TEST_CASE("matvec and transpose") {
    Matrix m(2, 3, {1, 2, 3, 4, 5, 6});
    const std::vector<double> x{1.0, 0.0, -1.0};
    REQUIRE(matvec(m, x) == std::vector<double>{-2.0, -2.0});
    const Matrix t = transpose(m);
    REQUIRE(t.rows == 3);
    REQUIRE(t(0, 1) == 4.0);
    REQUIRE(t(2, 0) == 3.0);
}

TEST_CASE("rng streams are reproducible") {
    RngStream a(99), b(99), c(100);
    bool all_equal = true;
    bool any_differs = false;
    for (int i = 0; i < 10000; ++i) {
        const std::uint64_t va = a.next_u64();
        if (va != b.next_u64()) all_equal = false;
        if (va != c.next_u64()) any_differs = true;
    }
    REQUIRE(all_equal);
    REQUIRE(any_differs);
    REQUIRE(a.counter() == 10000);
}

TEST_CASE("rng uniform and normal ranges") {
    RngStream rng(5);
    double mean = 0.0;
    for (int i = 0; i < 2000; ++i) {
        const double u = rng.next_uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        mean += rng.next_normal();
    }
    mean /= 2000.0;
    REQUIRE(std::abs(mean) < 0.1);

    for (int i = 0; i < 100; ++i) REQUIRE(rng.next_below(7) < 7);
    REQUIRE_THROWS_AS(rng.next_below(0), std::invalid_argument);

    const auto zeros = rng.normal_vector(4, 0.0);
    REQUIRE(zeros == std::vector<double>(4, 0.0));
}

TEST_CASE("normal variates are bitwise reproducible per seed") {
    RngStream a(2024), b(2024);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_normal() == b.next_normal());
}
