// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <bit>
#include <cmath>
#include <filesystem>

#include "flowlab/tasks.hpp"

using namespace flowlab;
using namespace flowlab::tasks;
namespace fs = std::filesystem;

namespace {

int stroke_count(const GlyphTemplate& t) {
    int n = 0;
    for (auto row : t) n += std::popcount(static_cast<unsigned>(row));
    return n;
}

}  // namespace

TEST_CASE("standard glyph spec") {
    const auto spec = GlyphSpec::standard();
    CHECK_NOTHROW(spec.validate());
    CHECK(spec.charset.size() == 16);
    CHECK(spec.templates.size() == 16);
    CHECK(spec.canvas == 16);
    for (std::size_t i = 0; i < spec.charset.size(); ++i) {
        CHECK(spec.token_of(spec.charset[i]) == static_cast<int>(i));
        CHECK(spec.char_of(static_cast<int>(i)) == spec.charset[i]);
        for (auto row : spec.templates[i]) CHECK(row < 32);
    }
    CHECK_THROWS_AS(spec.token_of('Z'), CharsetError);
}

TEST_CASE("glyph spec validation") {
    auto spec = GlyphSpec::standard();
    spec.canvas = 6;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = GlyphSpec::standard();
    spec.left = 12;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = GlyphSpec::standard();
    spec.templates.pop_back();
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = GlyphSpec::standard();
    spec.templates[0][0] = 0x20;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("render is deterministic, binary and preserves stroke count") {
    const auto spec = GlyphSpec::standard();
    for (std::size_t i = 0; i < spec.charset.size(); ++i) {
        const char c = spec.charset[i];
        const Latent a = render_glyph(spec, c), b = render_glyph(spec, c);
        CHECK((a.array() == b.array()).all());
        CHECK(a.size() == 256);
        CHECK(((a.array() == 0.0) || (a.array() == 1.0)).all());
        CHECK(a.sum() == stroke_count(spec.templates[i]));
    }
    CHECK_THROWS_AS(render_glyph(spec, '?'), CharsetError);
}

TEST_CASE("glyphs are pairwise distinct") {
    const auto spec = GlyphSpec::standard();
    for (char a : spec.charset) {
        for (char b : spec.charset) {
            if (a != b) CHECK((render_glyph(spec, a) - render_glyph(spec, b)).cwiseAbs().sum() > 0.0);
        }
    }
}

TEST_CASE("glyph reward examples") {
    const auto spec = GlyphSpec::standard();
    const Latent target = render_glyph(spec, '7');
    CHECK(glyph_reward(target, '7', spec) == 1.0);
    CHECK(glyph_reward(Latent::Ones(256) - target, '7', spec) == 0.0);
    CHECK(glyph_reward(Latent::Constant(256, 0.5), '7', spec) == 0.5);
    CHECK_THROWS_AS(glyph_reward(Latent::Zero(255), '7', spec), ShapeError);
    CHECK_THROWS_AS(glyph_reward(target, 'q', spec), CharsetError);
    CHECK(glyph_reward(Latent::Constant(256, 3.0), '7', spec) == 0.0);
}

TEST_CASE("glyph reward is uniquely maximized by the target over binary canvases") {
    const auto spec = GlyphSpec::standard();
    Rng rng(1);
    for (char c : spec.charset) {
        const Latent target = render_glyph(spec, c);
        for (int k = 0; k < 50; ++k) {
            Latent other = target;
            const int flips = 1 + static_cast<int>(rng.index(20));
            for (int f = 0; f < flips; ++f) {
                const auto i = static_cast<Eigen::Index>(rng.index(256));
                other[i] = 1.0 - other[i];
            }
            if ((other.array() == target.array()).all()) continue;
            CHECK(glyph_reward(other, c, spec) < 1.0);
        }
    }
}

TEST_CASE("mixture sampling") {
    Rng rng(2);
    const auto tight = MixtureSpec::single({1.5, -2.0}, Eigen::Matrix2d::Identity() * 1e-24);
    for (const auto& p : sample_mixture(tight, 100, rng)) {
        CHECK(std::abs(p.x() - 1.5) < 1e-9);
        CHECK(std::abs(p.y() + 2.0) < 1e-9);
    }

    const int n = 100000;
    const auto unit = MixtureSpec::single({1.0, 1.0}, Eigen::Matrix2d::Identity());
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& p : sample_mixture(unit, n, rng)) mean += p;
    mean /= n;
    CHECK(std::abs(mean.x() - 1.0) < 3.0 / std::sqrt(n));
    CHECK(std::abs(mean.y() - 1.0) < 3.0 / std::sqrt(n));

    MixtureSpec two;
    two.means = {{-10.0, 0.0}, {10.0, 0.0}};
    two.weights = {1.0, 0.0};
    for (const auto& p : sample_mixture(two, 2000, rng)) CHECK(p.x() < 0.0);
}

TEST_CASE("mixture sampling is a pure function of the seed") {
    MixtureSpec two;
    two.means = {{-1.0, 0.0}, {1.0, 2.0}};
    two.weights = {0.3, 0.7};
    Rng a(3), b(3);
    CHECK(sample_mixture(two, 500, a) == sample_mixture(two, 500, b));
}

TEST_CASE("mixture validation") {
    MixtureSpec m;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m.means = {{0.0, 0.0}};
    m.weights = {0.9};
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m.weights = {1.0};
    CHECK_NOTHROW(m.validate());
    m.covariance << 1.0, 2.0, 2.0, 1.0;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m.covariance << 1.0, 0.1, 0.0, 1.0;
    CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("edit operations") {
    const auto spec = GlyphSpec::standard();
    const int side = spec.canvas;
    for (char c : spec.charset) {
        const Latent g = render_glyph(spec, c);
        CHECK((apply_edit(spec, apply_edit(spec, g, EditOp::kInvert), EditOp::kInvert).array() == g.array()).all());
        CHECK((apply_edit(spec, apply_edit(spec, g, EditOp::kHflip), EditOp::kHflip).array() == g.array()).all());
        const Latent shifted = apply_edit(spec, g, EditOp::kVshift1);
        CHECK(shifted.sum() == g.sum());
        for (int r = 0; r + 1 < side; ++r) {
            for (int col = 0; col < side; ++col) CHECK(shifted[(r + 1) * side + col] == g[r * side + col]);
        }
        for (int col = 0; col < side; ++col) CHECK(shifted[col] == 0.0);
    }
    const Latent o = render_glyph(spec, 'O');
    CHECK((apply_edit(spec, o, EditOp::kHflip).array() == o.array()).all());
    const Latent inv = apply_edit(spec, o, EditOp::kInvert);
    CHECK(((inv + o).array() == 1.0).all());
}

TEST_CASE("vshift drops the bottom row and hflip stays in the glyph cell") {
    const auto spec = GlyphSpec::standard();
    Latent canvas = Latent::Zero(256);
    canvas[15 * 16 + 3] = 1.0;
    canvas[2 * 16 + 0] = 1.0;
    const Latent out = apply_edit(spec, canvas, EditOp::kVshift1);
    CHECK(out.sum() == 1.0);
    CHECK(out[3 * 16 + 0] == 1.0);
    Latent mark = Latent::Zero(256);
    mark[16 + spec.left] = 1.0;
    mark[16 + 0] = 0.25;
    const Latent flipped = apply_edit(spec, mark, EditOp::kHflip);
    CHECK(flipped[16 + spec.left + kGlyphWidth - 1] == 1.0);
    CHECK(flipped[16 + 0] == 0.25);
    CHECK_THROWS_AS(apply_edit(spec, Latent::Zero(10), EditOp::kInvert), ShapeError);
}

TEST_CASE("edit names and tokens") {
    for (auto op : kEditOps) CHECK(edit_op_from_string(to_string(op)) == op);
    CHECK(edit_token(EditOp::kInvert) == 0);
    CHECK(edit_token(EditOp::kHflip) == 1);
    CHECK(edit_token(EditOp::kVshift1) == 2);
    CHECK(to_string(EditOp::kVshift1) == "vshift1");
    CHECK_THROWS_AS(edit_op_from_string("rotate"), EditOpError);
}

TEST_CASE("edit pairs") {
    const auto spec = GlyphSpec::standard();
    const auto pair = make_edit_pair(spec, 'E', EditOp::kHflip);
    CHECK((pair.condition.array() == render_glyph(spec, 'E').array()).all());
    CHECK((pair.target.array() == apply_edit(spec, pair.condition, EditOp::kHflip).array()).all());
    CHECK(pair.instruction == 1);
    CHECK_THROWS_AS(make_edit_pair(spec, '!', EditOp::kInvert), CharsetError);
}

TEST_CASE("pgm round trip") {
    const auto dir = fs::temp_directory_path() / "flowlab_test_tasks_pgm";
    fs::create_directories(dir);
    const auto spec = GlyphSpec::standard();
    const Latent g = render_glyph(spec, 'A');
    write_pgm(dir / "a.pgm", g, 16, 16);
    int h = 0, w = 0;
    const Latent back = read_pgm(dir / "a.pgm", h, w);
    CHECK(h == 16);
    CHECK(w == 16);
    CHECK((back.array() == g.array()).all());
    fs::remove_all(dir);
}
