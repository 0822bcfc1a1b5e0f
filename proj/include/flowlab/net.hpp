// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Toy double-stream transformer predicting flow velocities. Text and image
// tokens keep separate weights per block and meet in one joint attention with
// multimodal rotary positions. Timestep conditioning is shift/scale
// modulation of the pre-norm activations; the output projection starts at
// zero so a fresh model predicts the zero velocity field.

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "flowlab/autodiff.hpp"
#include "flowlab/positional.hpp"
#include "flowlab/sampler.hpp"

namespace flowlab::net {

using autodiff::Gradients;
using autodiff::ParameterStore;

struct ModelConfig {
    int layers = 4;
    int heads = 4;
    int head_dim = 16;
    int hidden = 64;
    double ffn_mult = 4.0;
    int patch = 2;
    int vocab = 32;
    int channels = 1;
    positional::RopeConfig rope = positional::RopeConfig::without_frames(16);

    void validate() const;
    int ffn_hidden() const;
    int patch_dim() const { return patch * patch * channels; }
};

/// Canvas size in pixels. Both sides must be multiples of the patch size.
struct ImageGeometry {
    int height = 16;
    int width = 16;
};

/// One batch element. `image` and `condition` are flat canvases
/// (row-major pixels, channels innermost).
struct ModelInput {
    std::vector<int> tokens;
    Latent image;
    std::optional<Latent> condition;
    double t = 0.5;
};

struct ForwardOptions {
    positional::FrameAssignment frames;
    /// Replaces the centered ids of the noised-image tokens (row-major patch order).
    std::optional<std::vector<positional::PositionId>> target_ids;
};

/// Truncated-normal (std 0.02, cut at two std) weights, zero biases, unit
/// norm gains and a zero output projection. Deterministic in `seed`.
ParameterStore init_parameters(const ModelConfig& config, std::uint64_t seed);

/// Shapes every parameter must have under `config`.
std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> parameter_shapes(const ModelConfig& config);

/// Lossless canvas <-> patch-token maps standing in for an autoencoder.
Matrix patchify(const Latent& canvas, int height, int width, int channels, int patch);
Latent unpatchify(const Matrix& tokens, int height, int width, int channels, int patch);

/// Builds the forward graph for a homogeneous batch (same prompt length, same
/// geometry, condition present for all or none). Returns [B * tokens x patch_dim]
/// velocities for the noised-image tokens, batch-major.
autodiff::Var forward(autodiff::Tape& tape, const ModelConfig& config, const ImageGeometry& geometry,
                      std::span<const ModelInput> batch, const ForwardOptions& options = {});

/// Inference: flat velocity canvases, one per batch element.
std::vector<Latent> predict(const ParameterStore& params, const ModelConfig& config, const ImageGeometry& geometry,
                            std::span<const ModelInput> batch, const ForwardOptions& options = {});

/// Velocity oracle over `params` (held by reference; it must outlive the oracle).
sampler::VelocityOracle make_oracle(const ParameterStore& params, const ModelConfig& config, ImageGeometry geometry,
                                    ForwardOptions options = {});

struct LossAndGradients {
    double loss = 0.0;
    Gradients grads;  // one entry per parameter, zero where the loss does not depend on it
};

using LossClosure = std::function<autodiff::Var(autodiff::Tape&)>;

/// Evaluates the closure on a recording tape and backpropagates. Throws
/// NumericError when the loss is not finite.
LossAndGradients gradient(const ParameterStore& params, const LossClosure& loss);

/// Splits a [B * tokens x patch_dim] output into per-element canvases.
std::vector<Latent> split_output(const Matrix& output, std::size_t batch, const ModelConfig& config,
                                 const ImageGeometry& geometry);
/// Inverse of split_output (used to seed gradients).
Matrix join_canvases(std::span<const Latent> canvases, const ModelConfig& config, const ImageGeometry& geometry);

}  // namespace flowlab::net
