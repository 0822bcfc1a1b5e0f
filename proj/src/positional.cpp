// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/positional.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace flowlab::positional {

void RopeConfig::validate() const {
    if (head_dim <= 0 || head_dim % 2 != 0) {
        throw ConfigError("rope.head_dim must be a positive even integer, got " + std::to_string(head_dim));
    }
    int pairs = 0;
    for (int p : axis_split) {
        if (p < 0) throw ConfigError("rope.axis_split components must be non-negative");
        pairs += p;
    }
    if (2 * pairs != head_dim) {
        throw ConfigError("rope.axis_split must sum to head_dim/2 (" + std::to_string(head_dim / 2) + "), got " +
                          std::to_string(pairs));
    }
    if (!(base > 0.0) || !std::isfinite(base)) throw ConfigError("rope.base must be positive");
}

RopeConfig RopeConfig::with_frames(int head_dim) {
    int spatial = (head_dim / 2 - 2) / 2;
    RopeConfig config;
    config.head_dim = head_dim;
    // Odd remainders go to the row axis.
    config.axis_split = {2, head_dim / 2 - 2 - spatial, spatial};
    return config;
}

RopeConfig RopeConfig::without_frames(int head_dim) {
    RopeConfig config;
    config.head_dim = head_dim;
    config.axis_split = {0, head_dim / 2 - head_dim / 4, head_dim / 4};
    return config;
}

RopeTable::RopeTable(const RopeConfig& config) {
    config.validate();
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const int pairs = config.axis_split[axis];
        auto& freq = frequencies[axis];
        freq.resize(static_cast<std::size_t>(pairs));
        for (int j = 0; j < pairs; ++j) {
            freq[static_cast<std::size_t>(j)] = std::pow(config.base, -static_cast<double>(j) / pairs);
        }
    }
}

std::vector<PositionId> image_position_ids(int frame, int height, int width) {
    if (height < 1 || width < 1 || frame < 0) {
        throw DimensionError("image grid needs height, width >= 1 and frame >= 0 (got frame=" +
                             std::to_string(frame) + ", " + std::to_string(height) + "x" + std::to_string(width) +
                             ")");
    }
    std::vector<PositionId> ids;
    ids.reserve(static_cast<std::size_t>(height) * static_cast<std::size_t>(width));
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) ids.push_back({frame, r - height / 2, c - width / 2});
    }
    return ids;
}

std::vector<PositionId> text_position_ids(int offset, int length) {
    if (offset < 0 || length < 0) throw DimensionError("text ids need offset >= 0 and length >= 0");
    std::vector<PositionId> ids;
    ids.reserve(static_cast<std::size_t>(length));
    for (int k = 0; k < length; ++k) ids.push_back({0, offset + k, offset + k});
    return ids;
}

int default_text_offset(int height, int width) {
    return std::max((height + 1) / 2, (width + 1) / 2) + 1;
}

RotationTable rotation_table(const std::vector<PositionId>& ids, const RopeConfig& config) {
    const RopeTable table(config);
    const int pairs = config.head_dim / 2;
    RotationTable out{Matrix(static_cast<Eigen::Index>(ids.size()), pairs),
                      Matrix(static_cast<Eigen::Index>(ids.size()), pairs)};
    for (std::size_t n = 0; n < ids.size(); ++n) {
        const std::array<int, 3> coords{ids[n].frame, ids[n].row, ids[n].col};
        int pair = 0;
        for (std::size_t axis = 0; axis < 3; ++axis) {
            for (double omega : table.frequencies[axis]) {
                const double angle = coords[axis] * omega;
                out.cos(static_cast<Eigen::Index>(n), pair) = std::cos(angle);
                out.sin(static_cast<Eigen::Index>(n), pair) = std::sin(angle);
                ++pair;
            }
        }
    }
    return out;
}

void rotate_rows(Matrix& rows, const RotationTable& table, int head_dim, bool inverse) {
    const Eigen::Index pairs = head_dim / 2;
    if (rows.rows() != table.cos.rows() || table.cos.cols() != pairs || rows.cols() % head_dim != 0) {
        throw ShapeError("rotate_rows: " + std::to_string(rows.rows()) + "x" + std::to_string(rows.cols()) +
                         " rows against a table of " + std::to_string(table.cos.rows()) + " tokens");
    }
    const Eigen::Index heads = rows.cols() / head_dim;
    const double sign = inverse ? -1.0 : 1.0;
    for (Eigen::Index n = 0; n < rows.rows(); ++n) {
        double* row = rows.row(n).data();
        for (Eigen::Index h = 0; h < heads; ++h) {
            for (Eigen::Index j = 0; j < pairs; ++j) {
                const double cs = table.cos(n, j);
                const double sn = sign * table.sin(n, j);
                double& a = row[h * head_dim + 2 * j];
                double& b = row[h * head_dim + 2 * j + 1];
                const double a0 = a;
                a = a0 * cs - b * sn;
                b = a0 * sn + b * cs;
            }
        }
    }
}

Matrix apply_rotary(const Matrix& vectors, const std::vector<PositionId>& ids, const RopeConfig& config) {
    config.validate();
    if (static_cast<std::size_t>(vectors.rows()) != ids.size()) {
        throw ShapeError("apply_rotary: " + std::to_string(vectors.rows()) + " vectors for " +
                         std::to_string(ids.size()) + " ids");
    }
    if (vectors.cols() != config.head_dim) {
        throw ShapeError("apply_rotary: vector length " + std::to_string(vectors.cols()) + " != head_dim " +
                         std::to_string(config.head_dim));
    }
    Matrix out = vectors;
    rotate_rows(out, rotation_table(ids, config), config.head_dim);
    return out;
}

JointLayout joint_layout(int text_length, int grid_height, int grid_width, bool with_condition,
                         FrameAssignment frames) {
    JointLayout layout;
    layout.ids = text_position_ids(default_text_offset(grid_height, grid_width), text_length);
    layout.text_tokens = text_length;
    if (with_condition) {
        auto cond = image_position_ids(frames.condition, grid_height, grid_width);
        layout.condition_tokens = static_cast<int>(cond.size());
        layout.ids.insert(layout.ids.end(), cond.begin(), cond.end());
    }
    // Without a condition image the target is the only image and sits on frame 0.
    auto target = image_position_ids(with_condition ? frames.target : 0, grid_height, grid_width);
    layout.target_tokens = static_cast<int>(target.size());
    layout.ids.insert(layout.ids.end(), target.begin(), target.end());
    return layout;
}

}  // namespace flowlab::positional
