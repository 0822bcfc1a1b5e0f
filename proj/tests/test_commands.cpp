// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "flowlab/checkpoint.hpp"
#include "flowlab/commands.hpp"
#include "flowlab/tasks.hpp"
#include "flowlab/train.hpp"

using namespace flowlab;
using namespace flowlab::commands;
using config::Task;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("flowlab_test_cmd_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

config::RunConfig tiny(Task task) {
    auto c = config::default_config(task);
    c.model.layers = 1;
    c.model.heads = 2;
    c.model.head_dim = 8;
    c.model.hidden = 16;
    c.model.rope = task == Task::kEdit ? positional::RopeConfig::with_frames(8)
                                       : positional::RopeConfig::without_frames(8);
    c.optimizer.batch_size = 4;
    c.steps = 4;
    c.sample.n = 4;
    c.sample.steps = 3;
    c.schedule.steps = 3;
    c.finetune.steps = 2;
    c.finetune.batch = 2;
    c.finetune.eval_samples = 4;
    c.rl.group_size = 3;
    c.seed = 42;
    return c;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FLOWLAB_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("train-fm with zero steps keeps the initialization") {
    auto c = tiny(Task::kGlyph);
    c.steps = 0;
    const auto dir = fresh_dir("zero");
    const auto result = train_fm(c, dir);
    const auto m = lines(dir / kMetricsFile);
    REQUIRE(m.size() == 1);
    CHECK(m[0] == "step,loss,grad_norm,wall_ms");
    const auto init = net::init_parameters(c.model, derive_seed(c.seed, 1));
    const auto loaded = load_parameters(c, dir / kCheckpointFile);
    for (const auto& [name, v] : init) CHECK((loaded.at(name).array() == v.cast<float>().cast<double>().array()).all());
    fs::remove_all(dir);
}

TEST_CASE("train-fm reruns are byte identical") {
    for (auto task : {Task::kMixture, Task::kGlyph, Task::kEdit}) {
        auto c = tiny(task);
        const auto a = fresh_dir("rep_a"), b = fresh_dir("rep_b");
        train_fm(c, a);
        train_fm(c, b);
        CHECK(read_file(a / kMetricsFile) == read_file(b / kMetricsFile));
        CHECK(read_file(a / kCheckpointFile) == read_file(b / kCheckpointFile));
        CHECK(lines(a / kMetricsFile).size() == static_cast<std::size_t>(c.steps) + 1);
        c.seed += 1;
        const auto d = fresh_dir("rep_c");
        train_fm(c, d);
        CHECK(read_file(a / kMetricsFile) != read_file(d / kMetricsFile));
        for (const auto& p : {a, b, d}) fs::remove_all(p);
    }
}

TEST_CASE("wall clock column is opt-in") {
    auto c = tiny(Task::kMixture);
    const auto dir = fresh_dir("wall");
    train_fm(c, dir, RunOptions{true});
    const auto m = lines(dir / kMetricsFile);
    REQUIRE(m.size() > 1);
    CHECK(m[1].back() != ',');
    train_fm(c, dir);
    CHECK(lines(dir / kMetricsFile)[1].back() == ',');
    fs::remove_all(dir);
}

TEST_CASE("invalid config writes no files") {
    auto c = tiny(Task::kGlyph);
    c.model.vocab = 3;
    const auto dir = fresh_dir("invalid");
    CHECK_THROWS_AS(train_fm(c, dir), ConfigError);
    CHECK_FALSE(fs::exists(dir));
    CHECK_THROWS_AS(sample(c, net::ParameterStore{}, dir), ConfigError);
    CHECK_FALSE(fs::exists(dir));
}

TEST_CASE("divergent training stops with the last good checkpoint") {
    auto c = tiny(Task::kMixture);
    c.optimizer.lr = 1e250;
    c.optimizer.grad_clip = 0.0;
    c.optimizer.schedule = "constant";
    c.steps = 20;
    const auto dir = fresh_dir("diverge");
    CHECK_THROWS_AS(train_fm(c, dir), NumericError);
    CHECK(fs::exists(dir / kCheckpointFile));
    fs::remove_all(dir);
}

TEST_CASE("sample with n = 0 gives a valid empty summary") {
    auto c = tiny(Task::kGlyph);
    c.sample.n = 0;
    const auto params = net::init_parameters(c.model, 1);
    const auto dir = fresh_dir("n0");
    const auto r = sample(c, params, dir);
    CHECK(r.samples.empty());
    const auto summary = config::json::parse(read_file(dir / kSummaryFile));
    CHECK(summary["n"] == 0);
    CHECK(summary["rewards"].empty());
    fs::remove_all(dir);
}

TEST_CASE("sde with zero sigma equals ode") {
    for (auto task : {Task::kMixture, Task::kGlyph}) {
        auto c = tiny(task);
        c.sample.steps = 5;
        const auto dir = fresh_dir("sde0");
        const auto params = train_fm(c, dir).params;
        c.schedule.sigma = 0.0;
        c.sample.mode = "ode";
        const auto ode = generate(c, params, 9).samples;
        c.sample.mode = "sde";
        const auto sde = generate(c, params, 9).samples;
        REQUIRE(ode.size() == sde.size());
        for (std::size_t i = 0; i < ode.size(); ++i) CHECK((ode[i].array() == sde[i].array()).all());
        fs::remove_all(dir);
    }
}

TEST_CASE("sampled rewards match offline recomputation") {
    auto c = tiny(Task::kGlyph);
    c.sample.n = 6;
    const auto dir = fresh_dir("reward");
    const auto params = train_fm(c, dir).params;
    const auto r = sample(c, params, dir / "s");
    const auto spec = tasks::GlyphSpec::standard();
    REQUIRE(r.rewards.size() == 6);
    double mean = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        const double offline = tasks::glyph_reward(r.samples[i], spec.charset[i % 16], spec);
        CHECK(r.rewards[i] == offline);
        mean += offline / 6.0;
    }
    const auto summary = config::json::parse(read_file(dir / "s" / kSummaryFile));
    CHECK(summary["mean_reward"].get<double>() == doctest::Approx(mean).epsilon(1e-12));
    CHECK(fs::exists(dir / "s" / "samples" / "sample_0005.pgm"));
    fs::remove_all(dir);
}

TEST_CASE("mixture samples are written as csv") {
    auto c = tiny(Task::kMixture);
    const auto dir = fresh_dir("csv");
    const auto r = sample(c, net::init_parameters(c.model, 3), dir);
    const auto rows = lines(dir / "samples.csv");
    CHECK(rows.size() == r.samples.size() + 1);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint from another model is refused") {
    auto c = tiny(Task::kGlyph);
    const auto dir = fresh_dir("mismatch");
    train_fm(c, dir);
    auto other = c;
    other.model.layers = 2;
    try {
        (void)load_parameters(other, dir / kCheckpointFile);
        FAIL("expected a mismatch");
    } catch (const ConfigMismatchError& e) {
        CHECK(e.field() == "layers");
    }
    fs::remove_all(dir);
}

TEST_CASE("pairs files") {
    const auto dir = fresh_dir("pairs");
    fs::create_directories(dir);
    auto c = tiny(Task::kGlyph);
    write_separable_pairs(dir / "p.jsonl", 10, 3);
    const auto pairs = read_pairs(c, dir / "p.jsonl");
    CHECK(pairs.size() == 10);
    for (const auto& p : pairs) CHECK((p.win - p.lose).cwiseAbs().sum() > 0.0);

    {
        std::ofstream out(dir / "bad.jsonl");
        out << R"({"prompt":"3","win":"3","lose":"8"})" << "\n";
        out << R"({"prompt":"3","win":"3"})" << "\n";
    }
    try {
        (void)read_pairs(c, dir / "bad.jsonl");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    {
        std::ofstream out(dir / "junk.jsonl");
        out << "\n" << "not json\n";
    }
    try {
        (void)read_pairs(c, dir / "junk.jsonl");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    auto m = tiny(Task::kMixture);
    {
        std::ofstream out(dir / "m.jsonl");
        out << R"({"win":[1,1],"lose":[-1,0.5]})" << "\n";
    }
    const auto mp = read_pairs(m, dir / "m.jsonl");
    REQUIRE(mp.size() == 1);
    CHECK(mp[0].lose[1] == 0.5);
    fs::remove_all(dir);
}

TEST_CASE("dpo starts at log 2 and records the margin") {
    auto c = tiny(Task::kGlyph);
    const auto dir = fresh_dir("dpo");
    const auto ref = train_fm(c, dir / "fm").params;
    write_separable_pairs(dir / "p.jsonl", 8, 1);
    const auto pairs = read_pairs(c, dir / "p.jsonl");

    c.finetune.steps = 0;
    const auto unchanged = train_dpo(c, ref, pairs, dir / "zero");
    for (const auto& [name, m] : ref) CHECK((unchanged.params.at(name).array() == m.array()).all());
    CHECK(lines(dir / "zero" / kMetricsFile).size() == 1);

    c.finetune.steps = 3;
    train_dpo(c, ref, pairs, dir / "three");
    const auto m = lines(dir / "three" / kMetricsFile);
    REQUIRE(m.size() == 4);
    CHECK(m[0] == "step,loss,grad_norm,wall_ms,margin");
    const double first_loss = std::stod(m[1].substr(m[1].find(',') + 1));
    CHECK(std::abs(first_loss - std::numbers::ln2) < 1e-12);
    train_dpo(c, ref, pairs, dir / "again");
    CHECK(read_file(dir / "three" / kMetricsFile) == read_file(dir / "again" / kMetricsFile));
    CHECK(read_file(dir / "three" / kCheckpointFile) == read_file(dir / "again" / kCheckpointFile));
    fs::remove_all(dir);
}

TEST_CASE("grpo metrics are well formed and reproducible") {
    auto c = tiny(Task::kGlyph);
    const auto dir = fresh_dir("grpo");
    const auto ref = train_fm(c, dir / "fm").params;
    const auto r = train_grpo(c, ref, dir / "a");
    train_grpo(c, ref, dir / "b");
    CHECK(read_file(dir / "a" / kMetricsFile) == read_file(dir / "b" / kMetricsFile));
    CHECK(read_file(dir / "a" / kCheckpointFile) == read_file(dir / "b" / kCheckpointFile));
    const auto m = lines(dir / "a" / kMetricsFile);
    CHECK(m[0] == "step,loss,grad_norm,wall_ms,mean_reward,mean_kl,clip_fraction");
    REQUIRE(m.size() == 3);
    for (std::size_t i = 1; i < m.size(); ++i) {
        const double clip = std::stod(m[i].substr(m[i].rfind(',') + 1));
        CHECK(clip >= 0.0);
        CHECK(clip <= 1.0);
    }
    CHECK(std::isfinite(r.summary["mean_kl"].get<double>()));
    for (const char* key : {"reference_reward", "policy_reward", "improvement", "mean_train_reward"}) {
        CHECK(r.summary.contains(key));
    }
    auto mixture = tiny(Task::kMixture);
    CHECK_THROWS_AS(train_grpo(mixture, net::init_parameters(mixture.model, 1), dir / "m"), ConfigError);
    auto flat = c;
    flat.schedule.sigma = 0.0;
    CHECK_THROWS_AS(train_grpo(flat, ref, dir / "flat"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("gradcheck passes, and fails on a corrupted gradient") {
    const auto c = config::default_config(Task::kGlyph);
    GradcheckOptions opts;
    opts.samples = 20;
    const auto report = gradcheck(c, opts);
    for (const char* key : {"fm", "dpo", "grpo"}) {
        REQUIRE(report.contains(key));
        CHECK(report[key]["max_rel_error"].get<double>() < 1e-4);
    }
    CHECK(report["pass"] == true);
    opts.corrupt = true;
    const auto bad = gradcheck(c, opts);
    CHECK(bad["pass"] == false);
}

TEST_CASE("command line exit codes") {
    const auto dir = fresh_dir("cli");
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "bad.json");
        out << R"({"task":"glyph","model":{"vocab":2}})";
    }
    {
        std::ofstream out(dir / "ok.json");
        out << R"({"task":"mixture","steps":2,"model":{"layers":1},"sample":{"n":3,"steps":2}})";
    }
    const std::string d = dir.string();
    CHECK(run_cli("train-fm --config " + d + "/bad.json --out " + d + "/x") == 1);
    CHECK_FALSE(fs::exists(dir / "x"));
    CHECK(run_cli("train-fm --config " + d + "/missing.json --out " + d + "/x") == 1);
    CHECK(run_cli("no-such-command") == 1);
    CHECK(run_cli("train-fm --config " + d + "/ok.json --out " + d + "/fm --seed 3") == 0);
    CHECK(fs::exists(dir / "fm" / kCheckpointFile));
    CHECK(run_cli("sample --config " + d + "/ok.json --checkpoint " + d + "/fm/checkpoint.ffck --out " + d +
                  "/s --mode sde --n 2") == 0);
    CHECK(lines(dir / "s" / "samples.csv").size() == 3);
    CHECK(run_cli("gradcheck --task glyph --corrupt-gradient") == 3);
    fs::remove_all(dir);
}
