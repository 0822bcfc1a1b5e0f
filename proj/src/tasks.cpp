// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string_view>

namespace flowlab::tasks {
namespace {

GlyphTemplate parse_rows(const std::array<std::string_view, kGlyphHeight>& rows) {
    GlyphTemplate t{};
    for (int r = 0; r < kGlyphHeight; ++r) {
        std::uint8_t bits = 0;
        for (int c = 0; c < kGlyphWidth; ++c) {
            if (rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] == '#') {
                bits |= static_cast<std::uint8_t>(1u << (kGlyphWidth - 1 - c));
            }
        }
        t[static_cast<std::size_t>(r)] = bits;
    }
    return t;
}

struct FontEntry {
    char c;
    std::array<std::string_view, kGlyphHeight> rows;
};

// clang-format off
const FontEntry kFont[] = {
    {'0', {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."}},
    {'1', {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."}},
    {'2', {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"}},
    {'3', {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."}},
    {'4', {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."}},
    {'5', {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."}},
    {'6', {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."}},
    {'7', {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."}},
    {'8', {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."}},
    {'9', {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."}},
    {'A', {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
    {'E', {"#####", "#....", "#....", "####.", "#....", "#....", "#####"}},
    {'F', {"#####", "#....", "#....", "####.", "#....", "#....", "#...."}},
    {'H', {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
    {'O', {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}},
    {'X', {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"}},
};
// clang-format on

}  // namespace

void GlyphSpec::validate() const {
    if (charset.empty()) throw ConfigError("glyph charset is empty");
    if (templates.size() != charset.size()) throw ConfigError("glyph charset and templates differ in length");
    if (canvas < kGlyphHeight) throw ConfigError("glyph canvas must be at least 7");
    if (top < 0 || left < 0 || top + kGlyphHeight > canvas || left + kGlyphWidth > canvas) {
        throw ConfigError("glyph placement falls outside the canvas");
    }
    for (const auto& t : templates) {
        for (auto row : t) {
            if (row >= (1u << kGlyphWidth)) throw ConfigError("glyph template wider than 5 pixels");
        }
    }
    for (std::size_t i = 0; i < charset.size(); ++i) {
        if (charset.find(charset[i], i + 1) != std::string::npos) {
            throw ConfigError(std::string("glyph charset repeats '") + charset[i] + "'");
        }
    }
}

int GlyphSpec::token_of(char c) const {
    const auto pos = charset.find(c);
    if (pos == std::string::npos) throw CharsetError(std::string("character '") + c + "' is not in the charset");
    return static_cast<int>(pos);
}

char GlyphSpec::char_of(int token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= charset.size()) {
        throw CharsetError("glyph token " + std::to_string(token) + " is out of range");
    }
    return charset[static_cast<std::size_t>(token)];
}

GlyphSpec GlyphSpec::standard() {
    GlyphSpec spec;
    for (const auto& entry : kFont) {
        spec.charset.push_back(entry.c);
        spec.templates.push_back(parse_rows(entry.rows));
    }
    return spec;
}

Latent render_glyph(const GlyphSpec& spec, char c) {
    const auto& t = spec.templates[static_cast<std::size_t>(spec.token_of(c))];
    Latent out = Latent::Zero(spec.pixels());
    for (int r = 0; r < kGlyphHeight; ++r) {
        for (int col = 0; col < kGlyphWidth; ++col) {
            if (t[static_cast<std::size_t>(r)] & (1u << (kGlyphWidth - 1 - col))) {
                out[(spec.top + r) * spec.canvas + spec.left + col] = 1.0;
            }
        }
    }
    return out;
}

double glyph_reward(const Latent& sample, char target, const GlyphSpec& spec) {
    if (sample.size() != spec.pixels()) {
        throw ShapeError("glyph sample has " + std::to_string(sample.size()) + " pixels, expected " +
                         std::to_string(spec.pixels()));
    }
    const double mae = (sample - render_glyph(spec, target)).cwiseAbs().mean();
    return std::clamp(1.0 - mae, 0.0, 1.0);
}

void MixtureSpec::validate() const {
    if (means.empty()) throw ConfigError("mixture needs at least one component");
    if (weights.size() != means.size()) throw ConfigError("mixture weights and means differ in length");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw ConfigError("mixture weights must be non-negative");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError("mixture weights must sum to 1");
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 0.0) {
        throw ConfigError("mixture covariance must be symmetric");
    }
    if (covariance.llt().info() != Eigen::Success) throw ConfigError("mixture covariance must be positive definite");
}

MixtureSpec MixtureSpec::single(const Eigen::Vector2d& mean, const Eigen::Matrix2d& covariance) {
    MixtureSpec spec;
    spec.means = {mean};
    spec.covariance = covariance;
    spec.weights = {1.0};
    return spec;
}

std::vector<Eigen::Vector2d> sample_mixture(const MixtureSpec& spec, int n, Rng& rng) {
    spec.validate();
    if (n < 1) throw DomainError("sample_mixture needs n >= 1");
    const Eigen::Matrix2d chol = spec.covariance.llt().matrixL();
    std::vector<double> cumulative(spec.weights.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < spec.weights.size(); ++k) cumulative[k] = acc += spec.weights[k];

    std::vector<Eigen::Vector2d> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::size_t k = 0;
        if (spec.means.size() > 1) {
            const double u = rng.uniform() * acc;
            while (k + 1 < cumulative.size() && (u >= cumulative[k] || spec.weights[k] == 0.0)) ++k;
        }
        Eigen::Vector2d z(rng.normal(), rng.normal());
        out.push_back(spec.means[k] + chol * z);
    }
    return out;
}

std::string to_string(EditOp op) {
    switch (op) {
        case EditOp::kInvert: return "invert";
        case EditOp::kHflip: return "hflip";
        case EditOp::kVshift1: return "vshift1";
    }
    throw EditOpError("unknown edit op");
}

EditOp edit_op_from_string(const std::string& name) {
    for (auto op : kEditOps) {
        if (to_string(op) == name) return op;
    }
    throw EditOpError("unknown edit op '" + name + "'");
}

int edit_token(EditOp op) {
    switch (op) {
        case EditOp::kInvert: return 0;
        case EditOp::kHflip: return 1;
        case EditOp::kVshift1: return 2;
    }
    throw EditOpError("unknown edit op");
}

Latent apply_edit(const GlyphSpec& spec, const Latent& canvas, EditOp op) {
    spec.validate();
    const int side = spec.canvas;
    if (canvas.size() != spec.pixels()) {
        throw ShapeError("edit canvas is not " + std::to_string(side) + "x" + std::to_string(side));
    }
    Latent out(canvas.size());
    switch (op) {
        case EditOp::kInvert:
            out = (1.0 - canvas.array()).matrix();
            return out;
        case EditOp::kHflip:
            out = canvas;
            for (int r = 0; r < side; ++r) {
                for (int c = 0; c < kGlyphWidth; ++c) {
                    out[r * side + spec.left + c] = canvas[r * side + spec.left + (kGlyphWidth - 1 - c)];
                }
            }
            return out;
        case EditOp::kVshift1:
            out.setZero();
            for (int r = 1; r < side; ++r) out.segment(r * side, side) = canvas.segment((r - 1) * side, side);
            return out;
    }
    throw EditOpError("unknown edit op");
}

EditPair make_edit_pair(const GlyphSpec& spec, char c, EditOp op) {
    EditPair pair;
    pair.condition = render_glyph(spec, c);
    pair.target = apply_edit(spec, pair.condition, op);
    pair.instruction = edit_token(op);
    return pair;
}

void write_pgm(const std::filesystem::path& path, const Latent& canvas, int height, int width) {
    if (height < 1 || width < 1 || canvas.size() != static_cast<Eigen::Index>(height) * width) {
        throw ShapeError("pgm canvas does not match its dimensions");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << "P5\n" << width << " " << height << "\n255\n";
    for (Eigen::Index i = 0; i < canvas.size(); ++i) {
        const double v = std::clamp(canvas[i], 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
    if (!out) throw Error("failed writing " + path.string());
}

Latent read_pgm(const std::filesystem::path& path, int& height, int& width) {
    std::ifstream in(path, std::ios::binary);
    std::string magic;
    int maxval = 0;
    if (!(in >> magic >> width >> height >> maxval) || magic != "P5" || maxval != 255 || width < 1 || height < 1) {
        throw Error("not a P5 graymap: " + path.string());
    }
    in.get();
    Latent out(static_cast<Eigen::Index>(height) * width);
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        const int byte = in.get();
        if (byte == EOF) throw Error("truncated graymap: " + path.string());
        out[i] = byte / 255.0;
    }
    return out;
}

}  // namespace flowlab::tasks
