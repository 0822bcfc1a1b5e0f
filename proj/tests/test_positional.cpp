// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <set>

#include "flowlab/positional.hpp"

using namespace flowlab;
using namespace flowlab::positional;

namespace {

// Reference 1D rotary: pair j of a vector at position p is rotated by p * freqs[j].
Eigen::VectorXd rope_1d(const Eigen::VectorXd& v, double p, const std::vector<double>& freqs) {
    Eigen::VectorXd out = v;
    for (std::size_t j = 0; j < freqs.size(); ++j) {
        const double a = p * freqs[j];
        const auto i = static_cast<Eigen::Index>(2 * j);
        out[i] = v[i] * std::cos(a) - v[i + 1] * std::sin(a);
        out[i + 1] = v[i] * std::sin(a) + v[i + 1] * std::cos(a);
    }
    return out;
}

Matrix one_row(const Eigen::VectorXd& v) {
    Matrix m(1, v.size());
    m.row(0) = v.transpose();
    return m;
}

}  // namespace

TEST_CASE("image ids are centered and row-major") {
    const std::vector<PositionId> expect{{0, -1, -1}, {0, -1, 0}, {0, 0, -1}, {0, 0, 0}};
    CHECK(image_position_ids(0, 2, 2) == expect);
    CHECK(image_position_ids(0, 1, 1) == std::vector<PositionId>{{0, 0, 0}});

    const auto ids = image_position_ids(1, 3, 3);
    std::set<int> rows, cols;
    for (const auto& id : ids) {
        CHECK(id.frame == 1);
        rows.insert(id.row);
        cols.insert(id.col);
    }
    CHECK(rows == std::set<int>{-1, 0, 1});
    CHECK(cols == std::set<int>{-1, 0, 1});
}

TEST_CASE("image id ranges are contiguous for even and odd sides") {
    for (int h = 1; h <= 9; ++h) {
        for (int w = 1; w <= 9; ++w) {
            const auto ids = image_position_ids(0, h, w);
            REQUIRE(ids.size() == static_cast<std::size_t>(h * w));
            CHECK(ids.front().row == -(h / 2));
            CHECK(ids.back().row == h - 1 - h / 2);
            CHECK(ids.front().col == -(w / 2));
            CHECK(ids.back().col == w - 1 - w / 2);
        }
    }
}

TEST_CASE("image ids reject empty grids and negative frames") {
    CHECK_THROWS_AS(image_position_ids(0, 0, 3), DimensionError);
    CHECK_THROWS_AS(image_position_ids(0, 3, -1), DimensionError);
    CHECK_THROWS_AS(image_position_ids(-1, 2, 2), DimensionError);
}

TEST_CASE("text ids lie on the diagonal") {
    CHECK(text_position_ids(5, 3) == std::vector<PositionId>{{0, 5, 5}, {0, 6, 6}, {0, 7, 7}});
    CHECK(text_position_ids(0, 0).empty());
    CHECK(text_position_ids(2, 1) == std::vector<PositionId>{{0, 2, 2}});
}

TEST_CASE("rope table frequencies decrease strictly") {
    const RopeTable table(RopeConfig::with_frames(16));
    CHECK(table.frequencies[0].size() == 2);
    CHECK(table.frequencies[1].size() == 3);
    CHECK(table.frequencies[2].size() == 3);
    for (const auto& f : table.frequencies) {
        CHECK(f.front() == 1.0);
        for (std::size_t j = 1; j < f.size(); ++j) CHECK(f[j] < f[j - 1]);
    }
    CHECK(table.frequencies[1][1] == doctest::Approx(std::pow(10000.0, -1.0 / 3.0)).epsilon(1e-15));
}

TEST_CASE("rope config validation") {
    RopeConfig c;
    c.head_dim = 15;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = RopeConfig{};
    c.axis_split = {1, 4, 4};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.axis_split = {-1, 5, 4};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = RopeConfig{};
    c.base = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_NOTHROW(RopeConfig::with_frames(16).validate());
    CHECK_NOTHROW(RopeConfig::with_frames(32).validate());
    CHECK(RopeConfig::with_frames(32).axis_split == std::array<int, 3>{2, 7, 7});
}

TEST_CASE("apply_rotary with zero ids is the identity") {
    Rng rng(3);
    Matrix v(4, 16);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
    const std::vector<PositionId> zeros(4, PositionId{0, 0, 0});
    CHECK((apply_rotary(v, zeros, RopeConfig::with_frames(16)) - v).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("first row-axis pair rotates by the row id") {
    Matrix v = Matrix::Zero(1, 16);
    v(0, 0) = 1.0;  // frame_pairs = 0, so channels 0 and 1 are the first row pair
    const auto out = apply_rotary(v, {{0, 1, 0}}, RopeConfig::without_frames(16));
    CHECK(out(0, 0) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
    CHECK(out(0, 1) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
    CHECK((out.rightCols(14).cwiseAbs().maxCoeff()) == 0.0);
}

TEST_CASE("apply_rotary rejects mismatched shapes") {
    const auto cfg = RopeConfig::without_frames(16);
    CHECK_THROWS_AS(apply_rotary(Matrix::Zero(2, 16), {{0, 0, 0}}, cfg), ShapeError);
    CHECK_THROWS_AS(apply_rotary(Matrix::Zero(1, 8), {{0, 0, 0}}, cfg), ShapeError);
}

TEST_CASE("text tokens reproduce 1D rotary logits") {
    const auto cfg = RopeConfig::without_frames(16);
    const RopeTable table(cfg);
    std::vector<double> freqs = table.frequencies[1];
    freqs.insert(freqs.end(), table.frequencies[2].begin(), table.frequencies[2].end());
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const Eigen::VectorXd q = rng.normal_vector(16), k = rng.normal_vector(16);
        const int p = static_cast<int>(rng.index(40)), r = static_cast<int>(rng.index(40));
        const auto tq = apply_rotary(one_row(q), text_position_ids(p, 1), cfg);
        const auto tk = apply_rotary(one_row(k), text_position_ids(r, 1), cfg);
        const double logit = tq.row(0).dot(tk.row(0));
        const double reference = rope_1d(q, p - r, freqs).dot(k);
        CHECK(std::abs(logit - reference) < 1e-10);
    }
}

TEST_CASE("joint layout keeps image and text ids apart") {
    for (int g : {1, 2, 3, 8}) {
        const auto layout = joint_layout(5, g, g, false);
        std::set<PositionId> unique(layout.ids.begin(), layout.ids.end());
        CHECK(unique.size() == layout.ids.size());
        CHECK(layout.text_tokens == 5);
        CHECK(layout.target_tokens == g * g);
    }
}

TEST_CASE("edit layout places condition on frame 0 and target on frame 1") {
    const auto layout = joint_layout(1, 2, 2, true);
    REQUIRE(layout.ids.size() == 9u);
    CHECK(layout.ids[0].frame == 0);
    for (int i = 1; i < 5; ++i) CHECK(layout.ids[static_cast<std::size_t>(i)].frame == 0);
    for (int i = 5; i < 9; ++i) CHECK(layout.ids[static_cast<std::size_t>(i)].frame == 1);
    const auto swapped = joint_layout(1, 2, 2, true, {1, 0});
    CHECK(swapped.ids[1].frame == 1);
    CHECK(swapped.ids[5].frame == 0);
}

TEST_CASE("rotary logits depend only on id differences") {
    const auto cfg = RopeConfig::with_frames(16);
    Rng rng(21);
    auto pick = [&] { return static_cast<int>(rng.index(41)) - 20; };
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::VectorXd q = rng.normal_vector(16), k = rng.normal_vector(16);
        const PositionId a{pick(), pick(), pick()}, b{pick(), pick(), pick()}, d{pick(), pick(), pick()};
        const PositionId as{a.frame + d.frame, a.row + d.row, a.col + d.col};
        const PositionId bs{b.frame + d.frame, b.row + d.row, b.col + d.col};
        const double base = apply_rotary(one_row(q), {a}, cfg).row(0).dot(apply_rotary(one_row(k), {b}, cfg).row(0));
        const double shifted =
            apply_rotary(one_row(q), {as}, cfg).row(0).dot(apply_rotary(one_row(k), {bs}, cfg).row(0));
        CHECK(std::abs(base - shifted) < 1e-12);
    }
}

TEST_CASE("rotary preserves norms") {
    const auto cfg = RopeConfig::with_frames(16);
    Rng rng(22);
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::VectorXd v = rng.normal_vector(16);
        const PositionId id{static_cast<int>(rng.index(5)), static_cast<int>(rng.index(2001)) - 1000,
                            static_cast<int>(rng.index(2001)) - 1000};
        CHECK(std::abs(apply_rotary(one_row(v), {id}, cfg).row(0).norm() - v.norm()) < 1e-12);
    }
}
