// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/flowcore.hpp"

#include <algorithm>
#include <cmath>

namespace flowlab::flowcore {

void TimestepDist::validate() const {
    if (!std::isfinite(loc)) throw ConfigError("timestep.loc must be finite");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("timestep.scale must be positive");
}

double sample_timestep(const TimestepDist& dist, Rng& rng) {
    const double z = dist.loc + dist.scale * rng.normal();
    double t = 1.0 / (1.0 + std::exp(-z));
    // Saturated draws are pulled back inside the open interval.
    return std::clamp(t, std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0));
}

double clamp_timestep(double t) {
    return std::clamp(t, kTimeFloor, 1.0 - kTimeFloor);
}

FlowSample interpolate(const Latent& x0, const Latent& x1, double t) {
    require_same_size(x0, x1, "interpolate");
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("interpolate: t must lie in [0, 1]");
    FlowSample s;
    s.x0 = x0;
    s.x1 = x1;
    s.t = t;
    s.x_t = t * x0 + (1.0 - t) * x1;
    s.v_t = x0 - x1;
    return s;
}

double fm_loss(const Latent& v_pred, const Latent& v_target) {
    require_same_size(v_pred, v_target, "fm_loss");
    if (v_pred.size() == 0) return 0.0;
    return (v_pred - v_target).squaredNorm() / static_cast<double>(v_pred.size());
}

Latent fm_loss_grad(const Latent& v_pred, const Latent& v_target) {
    require_same_size(v_pred, v_target, "fm_loss_grad");
    if (v_pred.size() == 0) return Latent();
    return 2.0 * (v_pred - v_target) / static_cast<double>(v_pred.size());
}

}  // namespace flowlab::flowcore
