// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// JSON forms of every configuration block. Parsing is strict: unknown keys
// and wrongly typed values raise ConfigError; absent keys keep defaults.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "flowlab/flowcore.hpp"
#include "flowlab/net.hpp"
#include "flowlab/pipeline.hpp"
#include "flowlab/preference.hpp"
#include "flowlab/sampler.hpp"

namespace flowlab::config {

using nlohmann::json;

enum class Task { kMixture, kGlyph, kEdit };

std::string to_string(Task task);
Task task_from_string(const std::string& name);

struct OptimizerConfig {
    std::string name = "adam";
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 1.0;  // global-norm clip; 0 disables
    std::string schedule = "cosine";  // learning-rate decay: "constant" or "cosine"
    int warmup = 0;
    int batch_size = 16;

    void validate() const;
};

struct SampleConfig {
    std::string mode = "ode";  // "ode" or "sde"
    int n = 16;
    int steps = 50;

    void validate() const;
};

/// Budget of the preference fine-tuning commands (DPO and GRPO).
struct FinetuneConfig {
    int steps = 40;
    double lr = 2e-4;
    int batch = 4;          // pairs per DPO step, prompts per GRPO iteration
    int eval_samples = 64;  // paired evaluation size after GRPO

    void validate() const;
};

struct RunConfig {
    Task task = Task::kGlyph;
    net::ModelConfig model;
    sampler::NoiseSchedule schedule;
    preference::RLConfig rl;
    flowcore::TimestepDist timestep;
    pipeline::PipelineConfig pipeline;
    OptimizerConfig optimizer;
    SampleConfig sample;
    FinetuneConfig finetune;
    std::uint64_t seed = 0;
    int steps = 1000;
    std::string out_dir = "out";

    /// Validates every block and the cross-block constraints (geometry vs
    /// patch, vocabulary vs task).
    void validate() const;

    /// Image grid of the first bucket.
    net::ImageGeometry geometry() const;
};

/// Task-appropriate defaults (model shape, buckets, budgets).
RunConfig default_config(Task task);

json to_json(const positional::RopeConfig& c);
json to_json(const net::ModelConfig& c);
json to_json(const sampler::NoiseSchedule& c);
json to_json(const flowcore::TimestepDist& c);
json to_json(const preference::RLConfig& c);
json to_json(const pipeline::PipelineConfig& c);
json to_json(const OptimizerConfig& c);
json to_json(const SampleConfig& c);
json to_json(const FinetuneConfig& c);
json to_json(const RunConfig& c);

positional::RopeConfig rope_from_json(const json& j);
net::ModelConfig model_from_json(const json& j);
/// Overlays `j` on the defaults of the task named in it (default: glyph).
RunConfig run_from_json(const json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Throws ConfigMismatchError naming the first field where the two differ.
void require_same_model(const net::ModelConfig& expected, const net::ModelConfig& actual);

}  // namespace flowlab::config
