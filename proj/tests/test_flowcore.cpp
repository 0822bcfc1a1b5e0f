// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "flowlab/flowcore.hpp"

using namespace flowlab;
using namespace flowlab::flowcore;

namespace {

Latent vec(std::initializer_list<double> xs) {
    Latent v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v;
}

}  // namespace

TEST_CASE("timesteps stay inside the open unit interval") {
    Rng rng(1);
    TimestepDist wide{0.0, 8.0};
    for (int i = 0; i < 10000; ++i) {
        const double t = sample_timestep(wide, rng);
        CHECK(t > 0.0);
        CHECK(t < 1.0);
    }
}

TEST_CASE("vanishing scale concentrates timesteps at one half") {
    Rng rng(2);
    TimestepDist narrow{0.0, 1e-9};
    for (int i = 0; i < 100; ++i) CHECK(std::abs(sample_timestep(narrow, rng) - 0.5) < 1e-9);
}

TEST_CASE("logit-normal median is one half") {
    Rng rng(3);
    std::vector<double> ts(100000);
    for (auto& t : ts) t = sample_timestep({0.0, 1.0}, rng);
    std::nth_element(ts.begin(), ts.begin() + 50000, ts.end());
    CHECK(std::abs(ts[50000] - 0.5) < 0.01);
}

TEST_CASE("timestep distribution validation") {
    CHECK_THROWS_AS((TimestepDist{0.0, 0.0}.validate()), ConfigError);
    CHECK_THROWS_AS((TimestepDist{0.0, -1.0}.validate()), ConfigError);
    CHECK_THROWS_AS((TimestepDist{NAN, 1.0}.validate()), ConfigError);
}

TEST_CASE("clamp_timestep bounds the SDE time") {
    CHECK(clamp_timestep(0.0) == kTimeFloor);
    CHECK(clamp_timestep(1.0) == 1.0 - kTimeFloor);
    CHECK(clamp_timestep(0.4) == 0.4);
}

TEST_CASE("interpolant endpoints and hand example") {
    const Latent x0 = vec({1.0, -2.0, 3.0}), x1 = vec({0.5, 0.25, -1.0});
    CHECK(interpolate(x0, x1, 1.0).x_t == x0);
    CHECK(interpolate(x0, x1, 0.0).x_t == x1);
    const auto s = interpolate(vec({2.0}), vec({0.0}), 0.25);
    CHECK(s.x_t[0] == 0.5);
    CHECK(s.v_t[0] == 2.0);
    CHECK(s.t == 0.25);
}

TEST_CASE("interpolant fields satisfy their definitions") {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const Latent x0 = rng.normal_vector(7), x1 = rng.normal_vector(7);
        const double t = rng.uniform();
        const auto s = interpolate(x0, x1, t);
        CHECK((s.x_t - (t * x0 + (1.0 - t) * x1)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((s.v_t - (x0 - x1)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("interpolant is affine in t") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const Latent x0 = rng.normal_vector(5), x1 = rng.normal_vector(5);
        const double t = 0.1 + 0.6 * rng.uniform(), h = 0.1;
        const Latent second = interpolate(x0, x1, t + h).x_t - 2.0 * interpolate(x0, x1, t).x_t +
                              interpolate(x0, x1, t - h).x_t;
        CHECK(second.cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("interpolate rejects bad input") {
    CHECK_THROWS_AS(interpolate(vec({1.0}), vec({1.0, 2.0}), 0.5), ShapeError);
    CHECK_THROWS_AS(interpolate(vec({1.0}), vec({1.0}), 1.5), DomainError);
    CHECK_THROWS_AS(interpolate(vec({1.0}), vec({1.0}), -0.1), DomainError);
}

TEST_CASE("fm_loss values") {
    CHECK(fm_loss(vec({1.0, 2.0}), vec({1.0, 2.0})) == 0.0);
    CHECK(fm_loss(vec({1.0, 1.0}), vec({0.0, 0.0})) == 1.0);
    Rng rng(6);
    const Latent a = rng.normal_vector(9), b = rng.normal_vector(9);
    const double c = 3.0;
    CHECK(fm_loss(b + c * (a - b), b) == doctest::Approx(c * c * fm_loss(a, b)).epsilon(1e-12));
    CHECK(fm_loss(a, b) >= 0.0);
    CHECK_THROWS_AS(fm_loss(vec({1.0}), vec({1.0, 2.0})), ShapeError);
}

TEST_CASE("fm_loss gradient matches central differences") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Latent v = rng.normal_vector(6), target = rng.normal_vector(6);
        const Latent g = fm_loss_grad(v, target);
        CHECK((g - 2.0 * (v - target) / 6.0).cwiseAbs().maxCoeff() < 1e-15);
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            const double h = 1e-5;
            Latent up = v, down = v;
            up[i] += h;
            down[i] -= h;
            const double numeric = (fm_loss(up, target) - fm_loss(down, target)) / (2 * h);
            CHECK(std::abs(numeric - g[i]) / std::max({std::abs(g[i]), std::abs(numeric), 1e-12}) < 1e-6);
        }
    }
}
