// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Rectified-flow interpolant between data (t = 1) and noise (t = 0), the
// logit-normal timestep distribution and the velocity-regression loss.

#pragma once

#include "flowlab/common.hpp"

namespace flowlab::flowcore {

struct TimestepDist {
    double loc = 0.0;
    double scale = 1.0;

    void validate() const;
};

struct FlowSample {
    Latent x0;  // data
    Latent x1;  // noise
    double t = 0.0;
    Latent x_t;
    Latent v_t;
};

/// Clamp range for timesteps entering SDE-coupled code.
inline constexpr double kTimeFloor = 1e-3;

/// sigmoid(z), z ~ Normal(loc, scale^2).
double sample_timestep(const TimestepDist& dist, Rng& rng);

double clamp_timestep(double t);

FlowSample interpolate(const Latent& x0, const Latent& x1, double t);

/// Mean squared residual over all elements.
double fm_loss(const Latent& v_pred, const Latent& v_target);

/// d fm_loss / d v_pred = 2 (v_pred - v_target) / N.
Latent fm_loss_grad(const Latent& v_pred, const Latent& v_target);

}  // namespace flowlab::flowcore
