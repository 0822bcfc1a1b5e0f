// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// ODE and SDE samplers for the flow model.
//
// Two time variables appear here. The sampling grid ascends from noise
// (tau = eps) to data (tau = 1), matching the interpolant in flowcore. The SDE
// primitives (sde_drift, sde_step, transition_logprob, step_kl) are written in
// the reverse-time variable s = 1 - tau with velocity v_s = dx/ds = -v, where
// their closed forms hold. The flow_sde_* functions perform that change of
// variables so callers on the ascending grid never handle it themselves.

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "flowlab/common.hpp"

namespace flowlab::sampler {

/// What the velocity model is conditioned on: prompt token ids and, for
/// editing, a clean condition image in the same latent space as the sample.
struct Condition {
    std::vector<int> tokens;
    std::optional<Latent> image;
};

/// Batched velocity field: element i is v(xs[i], ts[i], conds[i]).
using VelocityOracle = std::function<std::vector<Latent>(std::span<const Latent> xs, std::span<const double> ts,
                                                         std::span<const Condition> conds)>;

struct NoiseSchedule {
    int steps = 10;
    double eps = 1e-3;
    double sigma = 0.3;  // constant noise magnitude

    void validate() const;
    double sigma_at(double /*t*/) const { return sigma; }
    /// t_k = eps + (1 - eps) k / T, k = 0..T.
    std::vector<double> times() const;
};

struct Trajectory {
    std::vector<Latent> states;  // T + 1 states on the ascending grid
    std::vector<double> times;
    std::vector<Latent> noises;     // T draws
    std::vector<double> logprobs;   // T transition log-densities (+inf when sigma = 0)
};

Latent ode_step(const Latent& x, const Latent& v, double dt);

/// v + sigma^2 / (2t) (x + (1 - t) v), in the reverse-time variable.
Latent sde_drift(const Latent& x, const Latent& v, double t, double sigma);

/// Euler-Maruyama step: x + drift dt + sigma sqrt(dt) noise.
Latent sde_step(const Latent& x, const Latent& v, double t, double dt, double sigma, const Latent& noise);

/// log N(x_next; x + drift dt, sigma^2 dt I), summed over dimensions.
double transition_logprob(const Latent& x_next, const Latent& x, const Latent& v, double t, double dt,
                          double sigma);

/// Closed-form KL between two step transitions that differ only in velocity.
double step_kl(const Latent& v_policy, const Latent& v_ref, double t, double dt, double sigma);

// Ascending-grid forms used by the samplers and by GRPO.

/// Mean of the step tau -> tau + dt.
Latent flow_sde_mean(const Latent& x, const Latent& v, double tau, double dt, double sigma);

Latent flow_sde_step(const Latent& x, const Latent& v, double tau, double dt, double sigma, const Latent& noise);

double flow_transition_logprob(const Latent& x_next, const Latent& x, const Latent& v, double tau, double dt,
                               double sigma);

double flow_step_kl(const Latent& v_policy, const Latent& v_ref, double tau, double dt, double sigma);

/// d(step mean) / dv for the ascending step: dt (1 + sigma^2 tau / (2 (1 - tau))).
double flow_mean_gain(double tau, double dt, double sigma);

/// One SDE rollout from x ~ N(0, I).
Trajectory sample_trajectory(const VelocityOracle& model, const Condition& condition, Eigen::Index dim,
                             const NoiseSchedule& schedule, Rng& rng);

/// G rollouts advanced in lockstep through batched oracle calls. Trajectory i
/// draws from Rng(derive_seed(base_seed, i)), so the result equals G serial
/// sample_trajectory calls with those streams.
std::vector<Trajectory> sample_group(const VelocityOracle& model, std::span<const Condition> conditions,
                                     Eigen::Index dim, const NoiseSchedule& schedule, std::uint64_t base_seed);

/// Deterministic Euler rollouts of dx = v dt over the grid of `schedule`
/// (sigma is ignored) starting from the given initial states.
std::vector<Latent> ode_rollout(const VelocityOracle& model, std::span<const Condition> conditions,
                                std::vector<Latent> initial, const NoiseSchedule& schedule);

}  // namespace flowlab::sampler
