// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace flowlab::train {

using autodiff::Tape;
using autodiff::Var;

std::vector<net::ModelInput> make_inputs(std::span<const Latent> xs, std::span<const double> ts,
                                         std::span<const sampler::Condition> conds) {
    if (ts.size() != xs.size() || conds.size() != xs.size()) throw ShapeError("make_inputs: ragged batch");
    std::vector<net::ModelInput> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i].tokens = conds[i].tokens;
        out[i].image = xs[i];
        out[i].condition = conds[i].image;
        out[i].t = ts[i];
    }
    return out;
}

Var fm_objective(Tape& tape, const ModelContext& model, std::span<const net::ModelInput> batch,
                 std::span<const Latent> targets) {
    if (targets.size() != batch.size()) throw ShapeError("fm_objective: one target per input");
    Var out = net::forward(tape, model.config, model.geometry, batch, model.options);
    const Matrix target = net::join_canvases(targets, model.config, model.geometry);
    const Matrix residual = out.value() - target;
    const double n = static_cast<double>(residual.size());
    return autodiff::scalar_loss(out, residual.squaredNorm() / n, (2.0 / n) * residual);
}

Var dpo_objective(Tape& tape, const ModelContext& model, std::span<const DpoExample> examples, double beta,
                  DpoStats* stats) {
    const std::size_t p = examples.size();
    if (p == 0) throw ShapeError("dpo_objective on an empty batch");
    std::vector<net::ModelInput> batch;
    batch.reserve(2 * p);
    for (const auto& e : examples) batch.push_back(e.win);
    for (const auto& e : examples) batch.push_back(e.lose);
    Var out = net::forward(tape, model.config, model.geometry, batch, model.options);
    const auto pred = net::split_output(out.value(), batch.size(), model.config, model.geometry);

    std::vector<Latent> grads(2 * p);
    double loss = 0.0, margin = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        const auto& e = examples[i];
        const auto terms =
            preference::dpo_terms({pred[i], pred[p + i]}, {e.ref_win, e.ref_lose}, e.target_win, e.target_lose, beta);
        loss += terms.loss;
        margin += terms.margin;
        grads[i] = terms.grad_win / static_cast<double>(p);
        grads[p + i] = terms.grad_lose / static_cast<double>(p);
    }
    loss /= static_cast<double>(p);
    if (stats) *stats = {loss, margin / static_cast<double>(p)};
    return autodiff::scalar_loss(out, loss, net::join_canvases(grads, model.config, model.geometry));
}

Var grpo_objective(Tape& tape, const ModelContext& model, std::span<const GrpoGroup> groups,
                   const preference::RLConfig& rl, GrpoStats* stats) {
    if (groups.empty()) throw ShapeError("grpo_objective without groups");
    std::vector<net::ModelInput> batch;
    for (const auto& g : groups) {
        for (const auto& traj : g.steps) {
            for (const auto& s : traj) batch.push_back(s.input);
        }
    }
    Var out = net::forward(tape, model.config, model.geometry, batch, model.options);
    const auto pred = net::split_output(out.value(), batch.size(), model.config, model.geometry);

    std::vector<Latent> grads;
    grads.reserve(batch.size());
    const double weight = 1.0 / static_cast<double>(groups.size());
    double loss = 0.0, kl = 0.0, clip = 0.0;
    std::size_t row = 0;
    for (const auto& g : groups) {
        std::vector<std::vector<preference::StepSample>> samples(g.steps.size());
        for (std::size_t i = 0; i < g.steps.size(); ++i) {
            for (const auto& s : g.steps[i]) {
                samples[i].push_back({&s.input.image, s.next, s.input.t, s.dt, s.sigma, s.old_logprob, pred[row++],
                                      s.v_ref});
            }
        }
        const auto result = preference::grpo_loss(samples, g.advantages, rl);
        loss += weight * result.loss;
        kl += weight * result.mean_kl;
        clip += weight * result.clip_fraction;
        for (const auto& traj : result.grad_v) {
            for (const auto& gv : traj) grads.push_back(weight * gv);
        }
    }
    if (stats) *stats = {loss, kl, clip};
    return autodiff::scalar_loss(out, loss, net::join_canvases(grads, model.config, model.geometry));
}

double global_norm(const net::Gradients& grads) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) sq += g.squaredNorm();
    return std::sqrt(sq);
}

Optimizer::Optimizer(const config::OptimizerConfig& config, int total_steps)
    : config_(config), total_steps_(std::max(1, total_steps)) {
    config_.validate();
}

double Optimizer::learning_rate() const {
    const auto k = static_cast<double>(t_);
    if (config_.warmup > 0 && k < config_.warmup) return config_.lr * (k + 1.0) / config_.warmup;
    if (config_.schedule == "constant") return config_.lr;
    const double progress = std::min(1.0, k / static_cast<double>(total_steps_));
    return config_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double Optimizer::step(net::ParameterStore& params, const net::Gradients& grads) {
    const double norm = global_norm(grads);
    if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
    const double lr = learning_rate();
    const double clip = (config_.grad_clip > 0.0 && norm > config_.grad_clip) ? config_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        const auto it = grads.find(name);
        if (it == grads.end()) continue;
        const Matrix g = clip * it->second;
        if (config_.name == "sgd") {
            p -= lr * g;
            continue;
        }
        auto [mi, fresh_m] = m_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
        auto [vi, fresh_v] = v_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
        Matrix& m = mi->second;
        Matrix& v = vi->second;
        m = config_.beta1 * m + (1.0 - config_.beta1) * g;
        v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseAbs2();
        p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.eps);
    }
    return norm;
}

}  // namespace flowlab::train
