// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/preference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "flowlab/flowcore.hpp"

namespace flowlab::preference {
namespace {

// log(1 + exp(x)) without overflow; exactly log 2 at x = 0.
double softplus(double x) {
    if (x == 0.0) return std::numbers::ln2;
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void require_table(const Table& table, std::size_t rows, std::size_t cols, const char* what) {
    if (table.size() != rows) throw ShapeError(std::string(what) + ": expected " + std::to_string(rows) + " rows");
    for (const auto& row : table) {
        if (row.size() != cols) throw ShapeError(std::string(what) + ": ragged or mis-sized row");
    }
}

}  // namespace

void RLConfig::validate() const {
    if (!(beta_dpo > 0.0) || !std::isfinite(beta_dpo)) throw ConfigError("rl.beta_dpo must be > 0");
    if (!(beta_kl >= 0.0) || !std::isfinite(beta_kl)) throw ConfigError("rl.beta_kl must be >= 0");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("rl.clip_eps must lie in (0, 1)");
    if (group_size < 2) throw ConfigError("rl.group_size must be >= 2");
}

DpoTerms dpo_terms(const BranchVelocities& policy, const BranchVelocities& reference, const Latent& target_win,
                   const Latent& target_lose, double beta) {
    require_same_size(target_win, target_lose, "dpo win/lose");
    require_same_size(policy.win, target_win, "dpo policy win");
    require_same_size(policy.lose, target_lose, "dpo policy lose");
    require_same_size(reference.win, target_win, "dpo reference win");
    require_same_size(reference.lose, target_lose, "dpo reference lose");

    DpoTerms out;
    const Latent rw = policy.win - target_win;
    const Latent rl = policy.lose - target_lose;
    out.diff_policy = rw.squaredNorm() - rl.squaredNorm();
    out.diff_ref = (reference.win - target_win).squaredNorm() - (reference.lose - target_lose).squaredNorm();
    out.margin = out.diff_ref - out.diff_policy;
    const double z = beta * (out.diff_policy - out.diff_ref);
    out.loss = softplus(z);
    const double dz = beta * sigmoid(z);
    out.grad_win = (2.0 * dz) * rw;
    out.grad_lose = (-2.0 * dz) * rl;
    return out;
}

double dpo_loss(const sampler::VelocityOracle& policy, const sampler::VelocityOracle& reference,
                const PreferencePair& pair, double t, const Latent& noise_win, const Latent& noise_lose,
                double beta) {
    require_same_size(pair.win, pair.lose, "preference pair");
    require_same_size(pair.win, noise_win, "dpo win noise");
    require_same_size(pair.lose, noise_lose, "dpo lose noise");
    if (!(t > 0.0 && t < 1.0)) throw DomainError("dpo time must lie in (0, 1)");

    const auto win = flowcore::interpolate(pair.win, noise_win, t);
    const auto lose = flowcore::interpolate(pair.lose, noise_lose, t);
    const std::vector<Latent> xs{win.x_t, lose.x_t};
    const std::vector<double> ts{t, t};
    const std::vector<sampler::Condition> conds{pair.condition, pair.condition};
    const auto vp = policy(xs, ts, conds);
    const auto vr = reference(xs, ts, conds);
    if (vp.size() != 2 || vr.size() != 2) throw ShapeError("velocity oracle returned the wrong batch size");
    return dpo_terms({vp[0], vp[1]}, {vr[0], vr[1]}, win.v_t, lose.v_t, beta).loss;
}

std::vector<double> group_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2) throw GroupSizeError("a group needs at least 2 rewards");
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / n);
    std::vector<double> out(rewards.size(), 0.0);
    if (!(sd >= 1e-12)) return out;
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
    return out;
}

GrpoWeights grpo_weights(std::span<const double> advantages, const Table& new_logprobs, const Table& old_logprobs,
                         const Table& kl_terms, const RLConfig& config) {
    const std::size_t g = advantages.size();
    if (g < 2) throw GroupSizeError("a group needs at least 2 members");
    if (new_logprobs.empty()) throw ShapeError("grpo: no logprobs");
    const std::size_t steps = new_logprobs.front().size();
    if (steps == 0) throw ShapeError("grpo: trajectories have no steps");
    require_table(new_logprobs, g, steps, "grpo new_logprobs");
    require_table(old_logprobs, g, steps, "grpo old_logprobs");
    require_table(kl_terms, g, steps, "grpo kl_terms");

    const double lo = 1.0 - config.clip_eps;
    const double hi = 1.0 + config.clip_eps;
    const double norm = 1.0 / (static_cast<double>(g) * static_cast<double>(steps));

    GrpoWeights out;
    out.d_new_logprob.assign(g, std::vector<double>(steps, 0.0));
    out.d_kl = -config.beta_kl * norm;
    std::size_t clipped = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < g; ++i) {
        const double a = advantages[i];
        double row = 0.0;
        for (std::size_t k = 0; k < steps; ++k) {
            const double r = std::exp(new_logprobs[i][k] - old_logprobs[i][k]);
            const double plain = r * a;
            const double clip = std::clamp(r, lo, hi) * a;
            if (plain <= clip) {
                row += plain;
                out.d_new_logprob[i][k] = plain * norm;  // d(r A)/d new = r A
            } else {
                row += clip;
                ++clipped;
            }
            row -= config.beta_kl * kl_terms[i][k];
        }
        total += row;
    }
    out.objective = total * norm;
    out.clip_fraction = static_cast<double>(clipped) * norm;
    return out;
}

double grpo_objective(const Group& group, const Table& new_logprobs, const Table& old_logprobs,
                      const Table& kl_terms, const RLConfig& config) {
    return grpo_weights(group.advantages, new_logprobs, old_logprobs, kl_terms, config).objective;
}

GrpoLoss grpo_loss(const std::vector<std::vector<StepSample>>& steps, std::span<const double> advantages,
                   const RLConfig& config) {
    const std::size_t g = steps.size();
    if (g != advantages.size()) throw ShapeError("grpo: steps and advantages disagree on group size");
    Table new_lp(g), old_lp(g), kl(g);
    double kl_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < g; ++i) {
        for (const auto& s : steps[i]) {
            new_lp[i].push_back(
                sampler::flow_transition_logprob(*s.next, *s.state, s.v_policy, s.tau, s.dt, s.sigma));
            old_lp[i].push_back(s.old_logprob);
            const double k = sampler::flow_step_kl(s.v_policy, s.v_ref, s.tau, s.dt, s.sigma);
            kl[i].push_back(k);
            kl_sum += k;
            ++count;
        }
    }
    const auto w = grpo_weights(advantages, new_lp, old_lp, kl, config);

    GrpoLoss out;
    out.objective = w.objective;
    out.loss = -w.objective;
    out.mean_kl = count ? kl_sum / static_cast<double>(count) : 0.0;
    out.clip_fraction = w.clip_fraction;
    out.grad_v.resize(g);
    for (std::size_t i = 0; i < g; ++i) {
        out.grad_v[i].reserve(steps[i].size());
        for (std::size_t k = 0; k < steps[i].size(); ++k) {
            const auto& s = steps[i][k];
            const double var = s.sigma * s.sigma * s.dt;
            const Latent mean = sampler::flow_sde_mean(*s.state, s.v_policy, s.tau, s.dt, s.sigma);
            const double gain = sampler::flow_mean_gain(s.tau, s.dt, s.sigma);
            const double sr = 1.0 - s.tau;
            const double c = s.sigma * (1.0 - sr) / (2.0 * sr) + 1.0 / s.sigma;
            const Latent d_logp = (*s.next - mean) * (gain / var);
            const Latent d_kl = (s.dt * c * c) * (s.v_policy - s.v_ref);
            out.grad_v[i].push_back(-(w.d_new_logprob[i][k] * d_logp + w.d_kl * d_kl));
        }
    }
    return out;
}

}  // namespace flowlab::preference
