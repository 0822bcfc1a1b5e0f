// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Multimodal scalable rotary encoding: image tokens are indexed from the image
// center, text tokens sit on the lattice diagonal, and an optional frame axis
// separates the images of an editing pair.

#pragma once

#include <array>
#include <vector>

#include "flowlab/common.hpp"

namespace flowlab::positional {

struct PositionId {
    int frame = 0;
    int row = 0;
    int col = 0;

    friend bool operator==(const PositionId&, const PositionId&) = default;
    friend auto operator<=>(const PositionId&, const PositionId&) = default;
};

/// Rotary channel allocation. Pair counts are per axis (frame, row, col);
/// the three blocks occupy consecutive channel pairs in that order.
struct RopeConfig {
    int head_dim = 16;
    std::array<int, 3> axis_split{0, 4, 4};
    double base = 10000.0;

    /// Throws ConfigError when head_dim is odd or the split does not cover it.
    void validate() const;

    /// Default split for an editing (frame-aware) layout: two frame pairs and
    /// the remainder divided between rows and columns.
    static RopeConfig with_frames(int head_dim);
    /// Split with no frame channels (text-to-image only).
    static RopeConfig without_frames(int head_dim);
};

/// Per-axis angular frequencies, base^(-j / axis_pairs).
struct RopeTable {
    std::array<std::vector<double>, 3> frequencies;

    explicit RopeTable(const RopeConfig& config);
};

/// Row-major ids of an H x W grid, centered: (frame, r - H/2, c - W/2).
std::vector<PositionId> image_position_ids(int frame, int height, int width);

/// k-th token at (0, offset + k, offset + k).
std::vector<PositionId> text_position_ids(int offset, int length);

/// First diagonal position strictly past every centered image id of the grid.
int default_text_offset(int height, int width);

/// Cosines and sines of every (token, channel pair) rotation angle.
struct RotationTable {
    Matrix cos;  // [tokens x head_dim/2]
    Matrix sin;
};

RotationTable rotation_table(const std::vector<PositionId>& ids, const RopeConfig& config);

/// Rotates each row in place. `rows` is [tokens x (k * head_dim)]: the same
/// rotation is applied to every head block of a row. `inverse` applies the
/// transpose rotation (used by the backward pass).
void rotate_rows(Matrix& rows, const RotationTable& table, int head_dim, bool inverse = false);

/// Rotates head-dim vectors (one per row) by their position ids.
Matrix apply_rotary(const Matrix& vectors, const std::vector<PositionId>& ids, const RopeConfig& config);

/// Token order used by the model: text, then (optional) condition image, then
/// the noised target image.
struct JointLayout {
    std::vector<PositionId> ids;
    int text_tokens = 0;
    int condition_tokens = 0;
    int target_tokens = 0;
};

struct FrameAssignment {
    int condition = 0;
    int target = 1;
};

JointLayout joint_layout(int text_length, int grid_height, int grid_width, bool with_condition,
                         FrameAssignment frames = {});

}  // namespace flowlab::positional
