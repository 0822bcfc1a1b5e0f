// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Runnable experiments behind the command-line tool. Every command validates
// its inputs before touching the output directory, writes metrics.csv with a
// header row, a JSON summary and (for training) checkpoint.ffck.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flowlab/config.hpp"
#include "flowlab/net.hpp"
#include "flowlab/preference.hpp"

namespace flowlab::commands {

namespace fs = std::filesystem;
using config::json;

inline constexpr const char* kCheckpointFile = "checkpoint.ffck";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kSummaryFile = "summary.json";

struct RunOptions {
    /// Fill the wall_ms column with measured times. Off by default so that
    /// reruns produce identical metrics files; the column is left empty.
    bool wall_clock = false;
};

struct TrainResult {
    net::ParameterStore params;
    json summary;
};

/// Conditioning of prompt `index` in the task's fixed prompt cycle.
sampler::Condition prompt_condition(const config::RunConfig& config, std::size_t index);

/// Task reward of a generated latent for the given prompt, if the task has one.
std::optional<double> task_reward(const config::RunConfig& config, std::size_t prompt_index, const Latent& sample);

/// Latent dimension of one sample.
Eigen::Index latent_dim(const config::RunConfig& config);

/// Model context (geometry and frame layout) of the task.
net::ForwardOptions forward_options(const config::RunConfig& config);

TrainResult train_fm(const config::RunConfig& config, const fs::path& out_dir, const RunOptions& options = {});

struct SampleResult {
    std::vector<Latent> samples;
    std::vector<double> rewards;  // empty for tasks without a reward
    json summary;
};

/// Draws `config.sample.n` samples in the configured mode. Sample i uses
/// prompt i and the noise stream derive_seed(seed, i).
SampleResult generate(const config::RunConfig& config, const net::ParameterStore& params, std::uint64_t seed);

/// generate() plus files: PGM images (or samples.csv for the mixture task)
/// and summary.json.
SampleResult sample(const config::RunConfig& config, const net::ParameterStore& params, const fs::path& out_dir);

/// Loads a checkpoint after checking it was written for `config.model`.
net::ParameterStore load_parameters(const config::RunConfig& config, const fs::path& checkpoint);

/// Parses a JSON-lines file of preference pairs. Glyph lines look like
/// {"prompt": "3", "win": "3", "lose": "8"} (characters rendered with the
/// built-in font); mixture lines like {"win": [x, y], "lose": [x, y]}.
std::vector<preference::PreferencePair> read_pairs(const config::RunConfig& config, const fs::path& path);

/// Writes `n` glyph pairs whose win is the prompt's glyph and whose lose is a
/// different glyph.
void write_separable_pairs(const fs::path& path, int n, std::uint64_t seed);

TrainResult train_dpo(const config::RunConfig& config, const net::ParameterStore& reference,
                      const std::vector<preference::PreferencePair>& pairs, const fs::path& out_dir,
                      const RunOptions& options = {});

/// Mean reward of the two models under the sample settings, same prompts and seeds.
struct PairedEvaluation {
    double reference = 0.0;
    double policy = 0.0;
};

PairedEvaluation paired_evaluation(const config::RunConfig& config, const net::ParameterStore& reference,
                                   const net::ParameterStore& policy, int samples, std::uint64_t seed);

/// Gradient of the negated GRPO objective for one iteration: finetune.batch
/// prompts drawn from `rng`, group_size SDE rollouts each, averaged over groups.
struct GrpoIteration {
    net::Gradients grads;
    double loss = 0.0;
    double mean_reward = 0.0;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
};

GrpoIteration grpo_iteration(const config::RunConfig& config, const net::ParameterStore& policy,
                             const net::ParameterStore& reference, Rng& rng);

TrainResult train_grpo(const config::RunConfig& config, const net::ParameterStore& reference, const fs::path& out_dir,
                       const RunOptions& options = {});

struct GradcheckOptions {
    int samples = 100;    // parameters checked per loss
    double step = 1e-5;   // central-difference step
    double threshold = 1e-4;
    /// Denominator floor of the relative error. Central differences carry an
    /// absolute rounding error near 1e-11 at this step, so components smaller
    /// than the floor are judged on absolute error instead.
    double floor = 1e-6;
    bool corrupt = false;  // perturbs the analytic gradient (negative control)
};

/// Finite-difference check of the FM, DPO and GRPO gradients. The report has
/// one object per loss (keys fm, dpo, grpo) and an overall "pass".
json gradcheck(const config::RunConfig& config, const GradcheckOptions& options = {});

}  // namespace flowlab::commands
