// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Toy datasets and rewards: 2D Gaussian mixtures, 5x7 glyphs rendered on a
// square canvas, and glyph edit pairs.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flowlab/common.hpp"

namespace flowlab::tasks {

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;

/// Rows of a glyph, top to bottom; bit 4 is the leftmost pixel.
using GlyphTemplate = std::array<std::uint8_t, kGlyphHeight>;

struct GlyphSpec {
    std::string charset;
    std::vector<GlyphTemplate> templates;  // parallel to charset
    int canvas = 16;
    int top = 4;
    int left = 5;

    void validate() const;
    /// Token id of `c` (its position in the charset).
    int token_of(char c) const;
    char char_of(int token) const;
    Eigen::Index pixels() const { return static_cast<Eigen::Index>(canvas) * canvas; }

    /// Digits 0-9 and A E F H O X from the built-in font, centred on a 16x16 canvas.
    static GlyphSpec standard();
};

/// Strokes 1, background 0, row-major canvas.
Latent render_glyph(const GlyphSpec& spec, char c);

/// 1 - mean |sample - render_glyph(target)|, clipped to [0, 1].
double glyph_reward(const Latent& sample, char target, const GlyphSpec& spec);

struct MixtureSpec {
    std::vector<Eigen::Vector2d> means;
    Eigen::Matrix2d covariance = Eigen::Matrix2d::Identity();
    std::vector<double> weights;

    void validate() const;
    static MixtureSpec single(const Eigen::Vector2d& mean, const Eigen::Matrix2d& covariance);
};

std::vector<Eigen::Vector2d> sample_mixture(const MixtureSpec& spec, int n, Rng& rng);

enum class EditOp { kInvert, kHflip, kVshift1 };

inline constexpr std::array<EditOp, 3> kEditOps{EditOp::kInvert, EditOp::kHflip, EditOp::kVshift1};

std::string to_string(EditOp op);
EditOp edit_op_from_string(const std::string& name);
/// The op's instruction token.
int edit_token(EditOp op);

/// Applies `op` to a canvas of `spec`. hflip mirrors the columns of the glyph
/// cell; vshift1 moves every row down one, dropping the bottom row and
/// clearing the top one.
Latent apply_edit(const GlyphSpec& spec, const Latent& canvas, EditOp op);

struct EditPair {
    Latent condition;
    Latent target;
    int instruction = 0;
};

EditPair make_edit_pair(const GlyphSpec& spec, char c, EditOp op);

/// Binary PGM (P5, maxval 255); values are clamped to [0, 1] and rounded.
void write_pgm(const std::filesystem::path& path, const Latent& canvas, int height, int width);
/// Reads a P5 file back into [0, 1] values.
Latent read_pgm(const std::filesystem::path& path, int& height, int& width);

}  // namespace flowlab::tasks
