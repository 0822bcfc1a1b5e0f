// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/sampler.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "flowlab/flowcore.hpp"

namespace flowlab::sampler {
namespace {

void require_time(double t) {
    if (!(t >= flowcore::kTimeFloor)) {
        throw DomainError("SDE time " + std::to_string(t) + " is below the floor " +
                          std::to_string(flowcore::kTimeFloor));
    }
}

void require_step(double dt) {
    if (!(dt > 0.0)) throw DomainError("step size must be positive");
}

void require_sigma(double sigma) {
    if (!(sigma > 0.0)) throw DegenerateDensityError("transition density needs sigma > 0");
}

std::vector<Latent> call_oracle(const VelocityOracle& model, std::span<const Latent> xs, double t,
                                std::span<const Condition> conds) {
    std::vector<double> ts(xs.size(), t);
    auto vs = model(xs, ts, conds);
    if (vs.size() != xs.size()) throw ShapeError("velocity oracle returned the wrong batch size");
    for (std::size_t i = 0; i < vs.size(); ++i) require_same_size(vs[i], xs[i], "velocity oracle output");
    return vs;
}

}  // namespace

void NoiseSchedule::validate() const {
    if (steps < 1) throw ConfigError("schedule.steps must be >= 1");
    if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("schedule.eps must lie in (0, 0.5)");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("schedule.sigma must be >= 0");
}

std::vector<double> NoiseSchedule::times() const {
    validate();
    std::vector<double> grid(static_cast<std::size_t>(steps) + 1);
    for (int k = 0; k <= steps; ++k) {
        grid[static_cast<std::size_t>(k)] = eps + (1.0 - eps) * static_cast<double>(k) / steps;
    }
    return grid;
}

Latent ode_step(const Latent& x, const Latent& v, double dt) {
    require_same_size(x, v, "ode_step");
    require_step(dt);
    return x + v * dt;
}

Latent sde_drift(const Latent& x, const Latent& v, double t, double sigma) {
    require_same_size(x, v, "sde_drift");
    require_time(t);
    return v + (sigma * sigma / (2.0 * t)) * (x + (1.0 - t) * v);
}

Latent sde_step(const Latent& x, const Latent& v, double t, double dt, double sigma, const Latent& noise) {
    require_same_size(x, noise, "sde_step noise");
    require_step(dt);
    return x + sde_drift(x, v, t, sigma) * dt + (sigma * std::sqrt(dt)) * noise;
}

namespace {

double gaussian_logpdf(const Latent& x, const Latent& mean, double variance) {
    const double d = static_cast<double>(x.size());
    return -0.5 * d * std::log(2.0 * std::numbers::pi * variance) - (x - mean).squaredNorm() / (2.0 * variance);
}

}  // namespace

double transition_logprob(const Latent& x_next, const Latent& x, const Latent& v, double t, double dt,
                          double sigma) {
    require_sigma(sigma);
    require_step(dt);
    require_same_size(x_next, x, "transition_logprob");
    const Latent mean = x + sde_drift(x, v, t, sigma) * dt;
    return gaussian_logpdf(x_next, mean, sigma * sigma * dt);
}

double step_kl(const Latent& v_policy, const Latent& v_ref, double t, double dt, double sigma) {
    require_same_size(v_policy, v_ref, "step_kl");
    require_time(t);
    require_step(dt);
    require_sigma(sigma);
    const double c = sigma * (1.0 - t) / (2.0 * t) + 1.0 / sigma;
    return 0.5 * dt * c * c * (v_policy - v_ref).squaredNorm();
}

Latent flow_sde_mean(const Latent& x, const Latent& v, double tau, double dt, double sigma) {
    require_step(dt);
    const Latent reversed = -v;
    return x - sde_drift(x, reversed, 1.0 - tau, sigma) * dt;
}

Latent flow_sde_step(const Latent& x, const Latent& v, double tau, double dt, double sigma, const Latent& noise) {
    require_same_size(x, noise, "flow_sde_step noise");
    return flow_sde_mean(x, v, tau, dt, sigma) + (sigma * std::sqrt(dt)) * noise;
}

double flow_transition_logprob(const Latent& x_next, const Latent& x, const Latent& v, double tau, double dt,
                               double sigma) {
    require_sigma(sigma);
    require_same_size(x_next, x, "flow_transition_logprob");
    return gaussian_logpdf(x_next, flow_sde_mean(x, v, tau, dt, sigma), sigma * sigma * dt);
}

double flow_step_kl(const Latent& v_policy, const Latent& v_ref, double tau, double dt, double sigma) {
    return step_kl(v_policy, v_ref, 1.0 - tau, dt, sigma);
}

double flow_mean_gain(double tau, double dt, double sigma) {
    const double s = 1.0 - tau;
    require_time(s);
    return dt * (1.0 + sigma * sigma * (1.0 - s) / (2.0 * s));
}

Trajectory sample_trajectory(const VelocityOracle& model, const Condition& condition, Eigen::Index dim,
                             const NoiseSchedule& schedule, Rng& rng) {
    schedule.validate();
    Trajectory traj;
    traj.times = schedule.times();
    traj.states.reserve(traj.times.size());
    traj.states.push_back(rng.normal_vector(dim));
    for (int k = 0; k < schedule.steps; ++k) {
        const double tau = traj.times[static_cast<std::size_t>(k)];
        const double dt = traj.times[static_cast<std::size_t>(k) + 1] - tau;
        const double sigma = schedule.sigma_at(tau);
        const Latent& x = traj.states.back();
        const Latent v = call_oracle(model, std::span<const Latent>(&x, 1), tau,
                                     std::span<const Condition>(&condition, 1))[0];
        Latent noise = rng.normal_vector(dim);
        Latent next = flow_sde_step(x, v, tau, dt, sigma, noise);
        traj.logprobs.push_back(sigma > 0.0 ? flow_transition_logprob(next, x, v, tau, dt, sigma)
                                            : std::numeric_limits<double>::infinity());
        traj.noises.push_back(std::move(noise));
        traj.states.push_back(std::move(next));
    }
    return traj;
}

std::vector<Trajectory> sample_group(const VelocityOracle& model, std::span<const Condition> conditions,
                                     Eigen::Index dim, const NoiseSchedule& schedule, std::uint64_t base_seed) {
    schedule.validate();
    const std::size_t g = conditions.size();
    const auto times = schedule.times();
    std::vector<Rng> rngs;
    std::vector<Trajectory> group(g);
    rngs.reserve(g);
    for (std::size_t i = 0; i < g; ++i) {
        rngs.emplace_back(derive_seed(base_seed, i));
        group[i].times = times;
        group[i].states.push_back(rngs[i].normal_vector(dim));
    }
    std::vector<Latent> xs(g);
    for (int k = 0; k < schedule.steps; ++k) {
        const double tau = times[static_cast<std::size_t>(k)];
        const double dt = times[static_cast<std::size_t>(k) + 1] - tau;
        const double sigma = schedule.sigma_at(tau);
        for (std::size_t i = 0; i < g; ++i) xs[i] = group[i].states.back();
        const auto vs = call_oracle(model, xs, tau, conditions);
        for (std::size_t i = 0; i < g; ++i) {
            Latent noise = rngs[i].normal_vector(dim);
            Latent next = flow_sde_step(xs[i], vs[i], tau, dt, sigma, noise);
            group[i].logprobs.push_back(sigma > 0.0 ? flow_transition_logprob(next, xs[i], vs[i], tau, dt, sigma)
                                                    : std::numeric_limits<double>::infinity());
            group[i].noises.push_back(std::move(noise));
            group[i].states.push_back(std::move(next));
        }
    }
    return group;
}

std::vector<Latent> ode_rollout(const VelocityOracle& model, std::span<const Condition> conditions,
                                std::vector<Latent> initial, const NoiseSchedule& schedule) {
    if (initial.size() != conditions.size()) throw ShapeError("ode_rollout: one condition per initial state");
    const auto times = schedule.times();
    for (int k = 0; k < schedule.steps; ++k) {
        const double tau = times[static_cast<std::size_t>(k)];
        const double dt = times[static_cast<std::size_t>(k) + 1] - tau;
        const auto vs = call_oracle(model, initial, tau, conditions);
        for (std::size_t i = 0; i < initial.size(); ++i) initial[i] = ode_step(initial[i], vs[i], dt);
    }
    return initial;
}

}  // namespace flowlab::sampler
