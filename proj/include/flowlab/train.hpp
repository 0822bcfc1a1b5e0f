// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Training objectives expressed on the autodiff tape, and the optimizer.
//
// Each objective runs the model forward on a batch, evaluates its loss in
// closed form on the predicted velocities and attaches the loss gradient to
// the model output, so backpropagation reaches every parameter.

#pragma once

#include <span>
#include <vector>

#include "flowlab/config.hpp"
#include "flowlab/net.hpp"
#include "flowlab/preference.hpp"
#include "flowlab/sampler.hpp"

namespace flowlab::train {

struct ModelContext {
    net::ModelConfig config;
    net::ImageGeometry geometry;
    net::ForwardOptions options;
};

/// Builds model inputs from latents, times and conditions.
std::vector<net::ModelInput> make_inputs(std::span<const Latent> xs, std::span<const double> ts,
                                         std::span<const sampler::Condition> conds);

/// Mean squared velocity error over every element of the batch.
autodiff::Var fm_objective(autodiff::Tape& tape, const ModelContext& model, std::span<const net::ModelInput> batch,
                           std::span<const Latent> targets);

/// One DPO example: the noised win and lose inputs, their target velocities
/// and the frozen reference model's predictions on the same inputs.
struct DpoExample {
    net::ModelInput win;
    net::ModelInput lose;
    Latent target_win;
    Latent target_lose;
    Latent ref_win;
    Latent ref_lose;
};

struct DpoStats {
    double loss = 0.0;
    double margin = 0.0;  // mean of diff_ref - diff_policy
};

/// Mean DPO loss over the examples.
autodiff::Var dpo_objective(autodiff::Tape& tape, const ModelContext& model, std::span<const DpoExample> examples,
                            double beta, DpoStats* stats = nullptr);

/// One recorded SDE step for GRPO: the policy input at the step start, the
/// state it moved to, the log-density recorded at rollout time and the
/// reference velocity at the same input.
struct GrpoStep {
    net::ModelInput input;
    const Latent* next = nullptr;
    double dt = 0.0;
    double sigma = 0.0;
    double old_logprob = 0.0;
    Latent v_ref;
};

/// A group of G trajectories for one condition, steps[i][k].
struct GrpoGroup {
    std::vector<std::vector<GrpoStep>> steps;
    std::vector<double> advantages;
};

struct GrpoStats {
    double loss = 0.0;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
};

/// Negated GRPO objective averaged over the groups.
autodiff::Var grpo_objective(autodiff::Tape& tape, const ModelContext& model, std::span<const GrpoGroup> groups,
                             const preference::RLConfig& rl, GrpoStats* stats = nullptr);

/// Adam (or plain SGD) with optional global-norm gradient clipping.
class Optimizer {
public:
    /// `total_steps` sets the horizon of the learning-rate schedule.
    Optimizer(const config::OptimizerConfig& config, int total_steps);

    /// Learning rate of the next update.
    double learning_rate() const;

    /// Applies one update and returns the gradient norm before clipping.
    double step(net::ParameterStore& params, const net::Gradients& grads);

private:
    config::OptimizerConfig config_;
    int total_steps_;
    net::Gradients m_, v_;
    long long t_ = 0;
};

double global_norm(const net::Gradients& grads);

}  // namespace flowlab::train
