// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Preference objectives on top of flow matching: the pairwise DPO loss built
// from velocity-regression errors, and group-relative policy optimization
// over SDE trajectories.

#pragma once

#include <span>
#include <vector>

#include "flowlab/common.hpp"
#include "flowlab/sampler.hpp"

namespace flowlab::preference {

struct RLConfig {
    double beta_dpo = 0.05;
    double beta_kl = 0.01;
    double clip_eps = 0.2;
    int group_size = 8;

    void validate() const;
};

struct PreferencePair {
    sampler::Condition condition;
    Latent win;
    Latent lose;
};

struct Group {
    sampler::Condition condition;
    std::vector<sampler::Trajectory> trajectories;
    std::vector<double> rewards;
    std::vector<double> advantages;
};

/// Velocities predicted for the win and lose branches by one model.
struct BranchVelocities {
    Latent win;
    Latent lose;
};

struct DpoTerms {
    double loss = 0.0;
    double diff_policy = 0.0;
    double diff_ref = 0.0;
    /// Implicit margin diff_ref - diff_policy; positive when the policy
    /// favours wins more than the reference does.
    double margin = 0.0;
    Latent grad_win;   // d loss / d policy win velocity
    Latent grad_lose;  // d loss / d policy lose velocity
};

/// -log sigmoid(-beta (diff_policy - diff_ref)) with
/// diff = ||v_win - target_win||^2 - ||v_lose - target_lose||^2.
DpoTerms dpo_terms(const BranchVelocities& policy, const BranchVelocities& reference, const Latent& target_win,
                   const Latent& target_lose, double beta);

/// Builds both branches through the interpolant at the shared time t and
/// evaluates the loss with the two models.
double dpo_loss(const sampler::VelocityOracle& policy, const sampler::VelocityOracle& reference,
                const PreferencePair& pair, double t, const Latent& noise_win, const Latent& noise_lose,
                double beta);

/// (R_i - mean) / std with the population std; all zeros when std < 1e-12.
std::vector<double> group_advantages(std::span<const double> rewards);

using Table = std::vector<std::vector<double>>;  // [G][T]

/// Mean over members and steps of min(r A, clip(r, 1-eps, 1+eps) A) - beta KL,
/// with r = exp(new - old). The training loss is the negation.
double grpo_objective(const Group& group, const Table& new_logprobs, const Table& old_logprobs,
                      const Table& kl_terms, const RLConfig& config);

struct GrpoWeights {
    double objective = 0.0;
    Table d_new_logprob;  // d objective / d new_logprob
    double d_kl = 0.0;    // d objective / d kl term (identical for every entry)
    double clip_fraction = 0.0;
};

/// Objective plus its partial derivatives (zero where clipping is active).
GrpoWeights grpo_weights(std::span<const double> advantages, const Table& new_logprobs, const Table& old_logprobs,
                         const Table& kl_terms, const RLConfig& config);

/// One recorded SDE transition together with the policy and reference
/// velocities evaluated at its start state.
struct StepSample {
    const Latent* state = nullptr;
    const Latent* next = nullptr;
    double tau = 0.0;
    double dt = 0.0;
    double sigma = 0.0;
    double old_logprob = 0.0;
    Latent v_policy;
    Latent v_ref;
};

struct GrpoLoss {
    double loss = 0.0;  // negated objective
    double objective = 0.0;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
    std::vector<std::vector<Latent>> grad_v;  // d loss / d v_policy, [G][T]
};

/// Evaluates the GRPO loss for steps[i][k] and its gradient with respect to
/// each policy velocity.
GrpoLoss grpo_loss(const std::vector<std::vector<StepSample>>& steps, std::span<const double> advantages,
                   const RLConfig& config);

}  // namespace flowlab::preference
