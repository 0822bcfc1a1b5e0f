// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode differentiation over dense matrices. A Tape records every
// operation with its backward rule; parameters are leaves looked up by name
// in a ParameterStore and never copied.

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <deque>
#include <vector>

#include "flowlab/common.hpp"
#include "flowlab/positional.hpp"

namespace flowlab::autodiff {

using ParameterStore = std::map<std::string, Matrix>;
using Gradients = std::map<std::string, Matrix>;

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

class Tape {
public:
    /// `record = false` skips backward bookkeeping (inference only).
    explicit Tape(const ParameterStore* params = nullptr, bool record = true);

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var constant(Matrix value);
    /// Leaf bound to params[name]. Repeated calls return the same node.
    Var param(const std::string& name);

    using Backward = std::function<void(Tape&, std::size_t self)>;
    /// Appends a node. `backward` reads grad(self) and accumulates into inputs.
    Var push(Matrix value, bool needs_grad, Backward backward);

    const Matrix& value(std::size_t id) const;
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    /// Gradient buffer of a node, allocated (zeroed) on first access.
    Matrix& grad(std::size_t id);
    bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

    /// Backpropagates `seed` (same shape as out) through the recorded graph.
    void backward(Var out, const Matrix& seed);
    /// Scalar convenience: seed 1.
    void backward(Var out);

    /// Gradients of every parameter touched by the graph (zero if unreached).
    Gradients parameter_gradients();

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix owned;
        const Matrix* external = nullptr;
        Matrix grad;
        bool needs_grad = false;
        Backward backward;
    };

    const ParameterStore* params_;
    bool record_;
    std::deque<Node> nodes_;
    std::unordered_map<std::string, std::size_t> param_ids_;
};

// Operations. All shapes are [rows x cols]; token sequences are rows.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
/// a + row, with row [1 x cols] broadcast over every row of a.
Var add_row(Var a, Var row);
Var scale(Var a, double c);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
/// out.row(i) = a.row(index[i]).
Var gather_rows(Var a, std::vector<Eigen::Index> index);
/// Selects rows of a parameter table (embedding lookup).
Var embedding(Var table, const std::vector<int>& ids);

Var silu(Var a);
/// Tanh-approximated GELU.
Var gelu(Var a);

/// Row-wise normalization to zero mean and unit variance, no affine part.
Var layer_norm(Var a, double eps = 1e-6);
/// Root-mean-square normalization of each head_dim block, times gamma [1 x head_dim].
Var head_rms_norm(Var a, Var gamma, int head_dim, double eps = 1e-6);
/// x * (1 + scale[g]) + shift[g], where row r belongs to group g = r / group_rows and
/// shift, scale are [groups x cols].
Var modulate(Var x, Var shift, Var scale, Eigen::Index group_rows);
/// Fixed rotary rotation of every head block; table rows align with a's rows.
Var rotary(Var a, std::shared_ptr<const positional::RotationTable> table, int head_dim);
/// Multi-head softmax attention over consecutive blocks of seq_len rows.
Var attention(Var q, Var k, Var v, int heads, int head_dim, Eigen::Index seq_len);

/// 0.5 * sum of squares, as a [1 x 1] node.
Var half_sum_squares(Var a);
/// A scalar node whose derivative with respect to `input` is given; used to
/// attach closed-form loss gradients to model outputs.
Var scalar_loss(Var input, double value, Matrix grad_wrt_input);

}  // namespace flowlab::autodiff
