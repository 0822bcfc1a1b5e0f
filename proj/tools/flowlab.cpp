// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// flowlab: train, sample and check toy flow models from the command line.
//
// Exit codes: 0 success, 1 invalid input, 2 numeric failure, 3 a check
// (gradcheck) did not pass.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "flowlab/commands.hpp"
#include "flowlab/config.hpp"
#include "flowlab/errors.hpp"

namespace {

namespace fs = std::filesystem;
using namespace flowlab;

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kNumeric = 2;
constexpr int kCheckFailed = 3;

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool wall_clock = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "Run config (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Overrides the config seed");
    cmd->add_option("--out", c.out, "Output directory (overrides out_dir)");
    cmd->add_flag("--wall-clock", c.wall_clock, "Record wall_ms in metrics.csv");
}

config::RunConfig resolve(const Common& c, const std::string& task) {
    config::RunConfig rc;
    if (!c.config_path.empty()) {
        rc = config::load_run_config(c.config_path);
        if (!task.empty() && config::task_from_string(task) != rc.task) {
            throw ConfigError("--task disagrees with the task in " + c.config_path);
        }
    } else {
        rc = config::default_config(config::task_from_string(task.empty() ? "glyph" : task));
    }
    if (c.seed) rc.seed = *c.seed;
    if (!c.out.empty()) rc.out_dir = c.out;
    rc.validate();
    return rc;
}

void print(const config::json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Rectified-flow laboratory on toy tasks"};
    app.require_subcommand(1);

    Common common;
    std::string task;
    std::string checkpoint_path, pairs_path, mode;
    std::optional<int> n;
    bool corrupt = false;

    auto* fm = app.add_subcommand("train-fm", "Flow-matching pre-training");
    auto* sample = app.add_subcommand("sample", "Draw samples from a checkpoint");
    auto* dpo = app.add_subcommand("train-dpo", "DPO fine-tuning on preference pairs");
    auto* grpo = app.add_subcommand("train-grpo", "GRPO fine-tuning with SDE rollouts");
    auto* check = app.add_subcommand("gradcheck", "Finite-difference gradient check");
    for (auto* cmd : {fm, sample, dpo, grpo, check}) {
        add_common(cmd, common);
        cmd->add_option("--task", task, "mixture, glyph or edit (when no config is given)");
    }
    for (auto* cmd : {sample, dpo, grpo}) {
        cmd->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required()->check(CLI::ExistingFile);
    }
    sample->add_option("--mode", mode, "ode or sde (overrides sample.mode)");
    sample->add_option("--n", n, "Number of samples (overrides sample.n)");
    dpo->add_option("--pairs", pairs_path, "JSON-lines preference pairs")->required()->check(CLI::ExistingFile);
    check->add_flag("--corrupt-gradient", corrupt, "Perturb the analytic gradient (negative control)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kInvalid;
    }

    try {
        auto rc = resolve(common, task);
        const commands::RunOptions options{common.wall_clock};
        const fs::path out = rc.out_dir;
        if (*fm) {
            print(commands::train_fm(rc, out, options).summary);
        } else if (*sample) {
            if (!mode.empty()) rc.sample.mode = mode;
            if (n) rc.sample.n = *n;
            rc.validate();
            const auto params = commands::load_parameters(rc, checkpoint_path);
            auto result = commands::sample(rc, params, out);
            result.summary.erase("rewards");
            print(result.summary);
        } else if (*dpo) {
            const auto reference = commands::load_parameters(rc, checkpoint_path);
            const auto pairs = commands::read_pairs(rc, pairs_path);
            print(commands::train_dpo(rc, reference, pairs, out, options).summary);
        } else if (*grpo) {
            const auto reference = commands::load_parameters(rc, checkpoint_path);
            print(commands::train_grpo(rc, reference, out, options).summary);
        } else if (*check) {
            commands::GradcheckOptions go;
            go.corrupt = corrupt;
            const auto report = commands::gradcheck(rc, go);
            print(report);
            if (!report.at("pass").get<bool>()) return kCheckFailed;
        }
        return kOk;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << '\n';
        return kInvalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInvalid;
    }
}
