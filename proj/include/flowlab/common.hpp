// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>

#include "flowlab/errors.hpp"

namespace flowlab {

/// A flat latent (pixels in canvas order, or a point's coordinates).
using Latent = Eigen::VectorXd;
// Token-major activations: one row per token, contiguous.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Seeded random source. Owns its engine and distributions so a stream can be
/// handed to exactly one consumer (trajectory, producer, ...).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    std::uint64_t next_u64() { return engine_(); }

    /// Integer uniformly drawn from [0, n).
    std::size_t index(std::size_t n) {
        std::uniform_int_distribution<std::size_t> dist(0, n - 1);
        return dist(engine_);
    }

    Latent normal_vector(Eigen::Index n) {
        Latent out(n);
        for (Eigen::Index i = 0; i < n; ++i) out[i] = normal();
        return out;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Derives an independent stream seed (splitmix64 finalizer over base + index).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Keeps freed activation buffers in the heap instead of returning them to the
/// kernel after every step. Call once at program start; no-op off glibc.
void tune_allocator();

inline void require_same_size(const Latent& a, const Latent& b, const char* what) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(what) + ": size " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
}

}  // namespace flowlab
