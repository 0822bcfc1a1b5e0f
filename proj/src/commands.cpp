// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "flowlab/checkpoint.hpp"
#include "flowlab/flowcore.hpp"
#include "flowlab/pipeline.hpp"
#include "flowlab/tasks.hpp"
#include "flowlab/train.hpp"

namespace flowlab::commands {
namespace {

using Clock = std::chrono::steady_clock;
using config::Task;

// Stream labels mixed into the run seed so each consumer of randomness owns
// an independent stream.
enum Stream : std::uint64_t {
    kInitStream = 1,
    kDataStream = 2,
    kDpoStream = 3,
    kGrpoStream = 4,
    kEvalStream = 5,
    kCheckStream = 6,
};

constexpr std::array<tasks::EditOp, 2> kTrainedEdits{tasks::EditOp::kInvert, tasks::EditOp::kHflip};
constexpr std::size_t kOracleChunk = 64;

const tasks::GlyphSpec& glyphs() {
    static const tasks::GlyphSpec spec = tasks::GlyphSpec::standard();
    return spec;
}

tasks::MixtureSpec mixture() { return tasks::MixtureSpec::single({1.0, 1.0}, Eigen::Matrix2d::Identity()); }

std::size_t prompt_count(const config::RunConfig& c) {
    switch (c.task) {
        case Task::kMixture: return 1;
        case Task::kGlyph: return glyphs().charset.size();
        case Task::kEdit: return glyphs().charset.size() * kTrainedEdits.size();
    }
    return 1;
}

char edit_char(std::size_t index) { return glyphs().charset[(index / kTrainedEdits.size()) % glyphs().charset.size()]; }
tasks::EditOp edit_op(std::size_t index) { return kTrainedEdits[index % kTrainedEdits.size()]; }

Latent prompt_target(const config::RunConfig& c, std::size_t index, Rng* rng) {
    switch (c.task) {
        case Task::kMixture: {
            Rng local(0);
            const auto p = sample_mixture(mixture(), 1, rng ? *rng : local).front();
            return Latent(p);
        }
        case Task::kGlyph: return tasks::render_glyph(glyphs(), glyphs().char_of(static_cast<int>(index % 16)));
        case Task::kEdit: return tasks::make_edit_pair(glyphs(), edit_char(index), edit_op(index)).target;
    }
    throw ConfigError("unknown task");
}

// Splits large batches so that inference memory stays bounded.
sampler::VelocityOracle chunked(sampler::VelocityOracle inner) {
    return [inner = std::move(inner)](std::span<const Latent> xs, std::span<const double> ts,
                                      std::span<const sampler::Condition> conds) {
        std::vector<Latent> out;
        out.reserve(xs.size());
        for (std::size_t start = 0; start < xs.size(); start += kOracleChunk) {
            const std::size_t n = std::min(kOracleChunk, xs.size() - start);
            auto part = inner(xs.subspan(start, n), ts.subspan(start, n), conds.subspan(start, n));
            for (auto& v : part) out.push_back(std::move(v));
        }
        return out;
    };
}

train::ModelContext context(const config::RunConfig& c) { return {c.model, c.geometry(), forward_options(c)}; }

std::string number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

class MetricsWriter {
public:
    MetricsWriter(const fs::path& path, std::vector<std::string> extra, bool wall_clock)
        : out_(path, std::ios::trunc), wall_clock_(wall_clock), start_(Clock::now()) {
        if (!out_) throw Error("cannot open " + path.string() + " for writing");
        out_ << "step,loss,grad_norm,wall_ms";
        for (const auto& e : extra) out_ << ',' << e;
        out_ << '\n';
    }

    void row(int step, double loss, double grad_norm, const std::vector<double>& extra) {
        out_ << step << ',' << number(loss) << ',' << number(grad_norm) << ',';
        if (wall_clock_) {
            out_ << std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start_).count();
        }
        for (double e : extra) out_ << ',' << number(e);
        out_ << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
    bool wall_clock_;
    Clock::time_point start_;
};

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
}

void prepare_output(const config::RunConfig& c, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    write_json(out_dir / "config.json", config::to_json(c));
}

void save(const config::RunConfig& c, const net::ParameterStore& params, const fs::path& out_dir) {
    checkpoint::save_checkpoint(out_dir / kCheckpointFile, checkpoint::from_parameters(c.model, params));
}

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

pipeline::Payload fm_payload(const config::RunConfig& c, Rng& rng) {
    pipeline::Payload p;
    const auto dim = latent_dim(c);
    const auto& spec = glyphs();
    for (int b = 0; b < c.optimizer.batch_size; ++b) {
        switch (c.task) {
            case Task::kMixture:
                p.tokens.push_back({0});
                p.latents.push_back(prompt_target(c, 0, &rng));
                break;
            case Task::kGlyph: {
                const int token = static_cast<int>(rng.index(spec.charset.size()));
                p.tokens.push_back({token});
                p.latents.push_back(tasks::render_glyph(spec, spec.char_of(token)));
                break;
            }
            case Task::kEdit: {
                const auto op = kTrainedEdits[rng.index(kTrainedEdits.size())];
                const auto pair = tasks::make_edit_pair(spec, spec.charset[rng.index(spec.charset.size())], op);
                p.tokens.push_back({pair.instruction});
                p.latents.push_back(pair.target);
                p.conditions.push_back(pair.condition);
                break;
            }
        }
        p.noises.push_back(rng.normal_vector(dim));
        p.times.push_back(flowcore::sample_timestep(c.timestep, rng));
    }
    return p;
}

// The run's model, its inputs, and targets for one FM batch.
struct FmBatch {
    std::vector<net::ModelInput> inputs;
    std::vector<Latent> targets;
};

FmBatch fm_batch(const pipeline::Payload& p) {
    FmBatch out;
    for (std::size_t b = 0; b < p.latents.size(); ++b) {
        const auto s = flowcore::interpolate(p.latents[b], p.noises[b], p.times[b]);
        net::ModelInput in;
        in.tokens = p.tokens[b];
        in.image = s.x_t;
        if (!p.conditions.empty()) in.condition = p.conditions[b];
        in.t = p.times[b];
        out.inputs.push_back(std::move(in));
        out.targets.push_back(s.v_t);
    }
    return out;
}

sampler::NoiseSchedule sampling_schedule(const config::RunConfig& c) {
    sampler::NoiseSchedule s = c.schedule;
    s.steps = c.sample.steps;
    if (c.sample.mode == "ode") s.sigma = 0.0;
    return s;
}

std::vector<Latent> final_states(const std::vector<sampler::Trajectory>& trajs) {
    std::vector<Latent> out;
    out.reserve(trajs.size());
    for (const auto& t : trajs) out.push_back(t.states.back());
    return out;
}

}  // namespace

sampler::Condition prompt_condition(const config::RunConfig& c, std::size_t index) {
    switch (c.task) {
        case Task::kMixture: return {{0}, std::nullopt};
        case Task::kGlyph: return {{static_cast<int>(index % glyphs().charset.size())}, std::nullopt};
        case Task::kEdit: {
            const auto pair = tasks::make_edit_pair(glyphs(), edit_char(index), edit_op(index));
            return {{pair.instruction}, pair.condition};
        }
    }
    throw ConfigError("unknown task");
}

std::optional<double> task_reward(const config::RunConfig& c, std::size_t index, const Latent& sample) {
    switch (c.task) {
        case Task::kMixture: return std::nullopt;
        case Task::kGlyph: return tasks::glyph_reward(sample, glyphs().charset[index % glyphs().charset.size()], glyphs());
        case Task::kEdit: {
            const Latent target = prompt_target(c, index, nullptr);
            require_same_size(sample, target, "edit sample");
            return std::clamp(1.0 - (sample - target).cwiseAbs().mean(), 0.0, 1.0);
        }
    }
    return std::nullopt;
}

Eigen::Index latent_dim(const config::RunConfig& c) {
    const auto g = c.geometry();
    return static_cast<Eigen::Index>(g.height) * g.width * c.model.channels;
}

net::ForwardOptions forward_options(const config::RunConfig&) { return {}; }

TrainResult train_fm(const config::RunConfig& c, const fs::path& out_dir, const RunOptions& options) {
    c.validate();
    const auto start = Clock::now();
    prepare_output(c, out_dir);
    TrainResult result;
    result.params = net::init_parameters(c.model, derive_seed(c.seed, kInitStream));
    train::Optimizer opt(c.optimizer, c.steps);
    MetricsWriter metrics(out_dir / kMetricsFile, {}, options.wall_clock);
    auto ctx = context(c);

    pipeline::Pipeline pipe(c.pipeline, derive_seed(c.seed, kDataStream), static_cast<std::uint64_t>(c.steps),
                            [&c](const pipeline::BucketKey&, std::uint64_t, Rng& rng) { return fm_payload(c, rng); });
    std::optional<double> first, last;
    for (int step = 1; step <= c.steps; ++step) {
        auto item = pipe.next();
        if (!item) throw Error("data pipeline ended early");
        if (!item->payload.matches(item->bucket, c.model.channels)) {
            throw ShapeError("payload does not match bucket " + item->bucket.str());
        }
        ctx.geometry = {item->bucket.height, item->bucket.width};
        const auto batch = fm_batch(item->payload);
        net::LossAndGradients lg;
        try {
            lg = net::gradient(result.params, [&](autodiff::Tape& tape) {
                return train::fm_objective(tape, ctx, batch.inputs, batch.targets);
            });
        } catch (const NumericError&) {
            save(c, result.params, out_dir);
            throw NumericError("FM loss became non-finite at step " + std::to_string(step) +
                               "; last good parameters saved");
        }
        const double norm = opt.step(result.params, lg.grads);
        metrics.row(step, lg.loss, norm, {});
        if (!first) first = lg.loss;
        last = lg.loss;
    }
    save(c, result.params, out_dir);
    result.summary = {{"command", "train-fm"}, {"task", config::to_string(c.task)}, {"steps", c.steps},
                      {"seed", c.seed},        {"wall_seconds", seconds_since(start)}};
    if (first) {
        result.summary["initial_loss"] = *first;
        result.summary["final_loss"] = *last;
    }
    write_json(out_dir / kSummaryFile, result.summary);
    return result;
}

SampleResult generate(const config::RunConfig& c, const net::ParameterStore& params, std::uint64_t seed) {
    c.validate();
    SampleResult result;
    const int n = c.sample.n;
    const auto schedule = sampling_schedule(c);
    const auto dim = latent_dim(c);
    const auto oracle = chunked(net::make_oracle(params, c.model, c.geometry(), forward_options(c)));
    std::vector<sampler::Condition> conds;
    for (int i = 0; i < n; ++i) conds.push_back(prompt_condition(c, static_cast<std::size_t>(i)));
    if (n > 0) {
        if (c.sample.mode == "ode") {
            std::vector<Latent> initial;
            for (int i = 0; i < n; ++i) initial.push_back(Rng(derive_seed(seed, static_cast<std::uint64_t>(i))).normal_vector(dim));
            result.samples = sampler::ode_rollout(oracle, conds, std::move(initial), schedule);
        } else {
            result.samples = final_states(sampler::sample_group(oracle, conds, dim, schedule, seed));
        }
    }
    for (int i = 0; i < n; ++i) {
        if (auto r = task_reward(c, static_cast<std::size_t>(i), result.samples[static_cast<std::size_t>(i)])) {
            result.rewards.push_back(*r);
        }
    }
    json& s = result.summary;
    s = {{"command", "sample"}, {"task", config::to_string(c.task)}, {"mode", c.sample.mode}, {"n", n},
         {"steps", schedule.steps}, {"sigma", schedule.sigma}, {"seed", seed}};
    if (c.task == Task::kMixture) {
        if (n > 0) {
            Eigen::Vector2d mean = Eigen::Vector2d::Zero();
            for (const auto& x : result.samples) mean += x.head<2>();
            mean /= n;
            Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
            for (const auto& x : result.samples) cov += (x.head<2>() - mean) * (x.head<2>() - mean).transpose();
            if (n > 1) cov /= (n - 1);
            s["mean"] = {mean[0], mean[1]};
            s["covariance"] = {{cov(0, 0), cov(0, 1)}, {cov(1, 0), cov(1, 1)}};
        }
    } else {
        json prompts = json::array();
        for (const auto& cond : conds) prompts.push_back(cond.tokens.front());
        s["prompts"] = prompts;
        s["rewards"] = result.rewards;
        s["mean_reward"] = result.rewards.empty()
                               ? 0.0
                               : std::accumulate(result.rewards.begin(), result.rewards.end(), 0.0) /
                                     static_cast<double>(result.rewards.size());
    }
    return result;
}

SampleResult sample(const config::RunConfig& c, const net::ParameterStore& params, const fs::path& out_dir) {
    c.validate();
    auto result = generate(c, params, c.seed);
    prepare_output(c, out_dir);
    json files = json::array();
    if (c.task == Task::kMixture) {
        std::ofstream out(out_dir / "samples.csv", std::ios::trunc);
        out << "x,y\n";
        for (const auto& x : result.samples) out << number(x[0]) << ',' << number(x[1]) << '\n';
        files.push_back("samples.csv");
    } else {
        fs::create_directories(out_dir / "samples");
        const auto g = c.geometry();
        for (std::size_t i = 0; i < result.samples.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "sample_%04zu.pgm", i);
            tasks::write_pgm(out_dir / "samples" / name, result.samples[i], g.height, g.width);
            files.push_back(std::string("samples/") + name);
        }
    }
    result.summary["files"] = files;
    write_json(out_dir / kSummaryFile, result.summary);
    return result;
}

net::ParameterStore load_parameters(const config::RunConfig& c, const fs::path& path) {
    return checkpoint::to_parameters(checkpoint::load_checkpoint(path), c.model);
}

std::vector<preference::PreferencePair> read_pairs(const config::RunConfig& c, const fs::path& path) {
    if (c.task == Task::kEdit) throw ConfigError("train-dpo supports the glyph and mixture tasks");
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open pairs file " + path.string());
    std::vector<preference::PreferencePair> pairs;
    std::string line;
    int number = 0;
    auto glyph = [&](const json& j, const char* key) -> char {
        const auto it = j.find(key);
        if (it == j.end() || !it->is_string() || it->get<std::string>().size() != 1) {
            throw ParseError(number, std::string("'") + key + "' must be a one-character string");
        }
        const char ch = it->get<std::string>()[0];
        if (glyphs().charset.find(ch) == std::string::npos) {
            throw ParseError(number, std::string("'") + key + "' is not in the glyph charset");
        }
        return ch;
    };
    auto point = [&](const json& j, const char* key) -> Latent {
        const auto it = j.find(key);
        if (it == j.end() || !it->is_array() || it->size() != 2 || !(*it)[0].is_number() || !(*it)[1].is_number()) {
            throw ParseError(number, std::string("'") + key + "' must be a 2-element number array");
        }
        return Eigen::Vector2d((*it)[0].get<double>(), (*it)[1].get<double>());
    };
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw ParseError(number, "not a JSON object");
        preference::PreferencePair pair;
        if (c.task == Task::kGlyph) {
            for (const auto& [key, value] : j.items()) {
                if (key != "prompt" && key != "win" && key != "lose") throw ParseError(number, "unknown key " + key);
            }
            pair.condition = {{glyphs().token_of(glyph(j, "prompt"))}, std::nullopt};
            pair.win = tasks::render_glyph(glyphs(), glyph(j, "win"));
            pair.lose = tasks::render_glyph(glyphs(), glyph(j, "lose"));
        } else {
            for (const auto& [key, value] : j.items()) {
                if (key != "win" && key != "lose") throw ParseError(number, "unknown key " + key);
            }
            pair.condition = {{0}, std::nullopt};
            pair.win = point(j, "win");
            pair.lose = point(j, "lose");
        }
        pairs.push_back(std::move(pair));
    }
    if (pairs.empty()) throw ParseError(number, "pairs file holds no pairs");
    return pairs;
}

void write_separable_pairs(const fs::path& path, int n, std::uint64_t seed) {
    Rng rng(seed);
    const auto& cs = glyphs().charset;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    for (int i = 0; i < n; ++i) {
        const std::size_t win = rng.index(cs.size());
        std::size_t lose = rng.index(cs.size() - 1);
        if (lose >= win) ++lose;
        out << json{{"prompt", std::string(1, cs[win])}, {"win", std::string(1, cs[win])},
                    {"lose", std::string(1, cs[lose])}}.dump()
            << '\n';
    }
}

namespace {

std::vector<train::DpoExample> dpo_examples(const config::RunConfig& c, const net::ParameterStore& reference,
                                            const std::vector<preference::PreferencePair>& pairs,
                                            const std::vector<std::size_t>& chosen, Rng& rng) {
    std::vector<train::DpoExample> out;
    std::vector<net::ModelInput> ref_inputs;
    for (std::size_t idx : chosen) {
        const auto& pair = pairs[idx];
        const double t = flowcore::sample_timestep(c.timestep, rng);
        const auto win = flowcore::interpolate(pair.win, rng.normal_vector(pair.win.size()), t);
        const auto lose = flowcore::interpolate(pair.lose, rng.normal_vector(pair.lose.size()), t);
        train::DpoExample e;
        e.win = {pair.condition.tokens, win.x_t, pair.condition.image, t};
        e.lose = {pair.condition.tokens, lose.x_t, pair.condition.image, t};
        e.target_win = win.v_t;
        e.target_lose = lose.v_t;
        ref_inputs.push_back(e.win);
        ref_inputs.push_back(e.lose);
        out.push_back(std::move(e));
    }
    const auto ref = net::predict(reference, c.model, c.geometry(), ref_inputs, forward_options(c));
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].ref_win = ref[2 * i];
        out[i].ref_lose = ref[2 * i + 1];
    }
    return out;
}

}  // namespace

TrainResult train_dpo(const config::RunConfig& c, const net::ParameterStore& reference,
                      const std::vector<preference::PreferencePair>& pairs, const fs::path& out_dir,
                      const RunOptions& options) {
    c.validate();
    if (pairs.empty()) throw ConfigError("train-dpo needs at least one preference pair");
    for (const auto& p : pairs) {
        require_same_size(p.win, p.lose, "preference pair");
        if (p.win.size() != latent_dim(c)) throw ShapeError("preference pair latent does not match the model grid");
    }
    const auto start = Clock::now();
    prepare_output(c, out_dir);
    TrainResult result;
    result.params = reference;
    config::OptimizerConfig oc = c.optimizer;
    oc.lr = c.finetune.lr;
    train::Optimizer opt(oc, c.finetune.steps);
    MetricsWriter metrics(out_dir / kMetricsFile, {"margin"}, options.wall_clock);
    const auto ctx = context(c);

    // Fixed probe batch for the margin trace: every pair, one draw each.
    std::vector<std::size_t> all(pairs.size());
    std::iota(all.begin(), all.end(), 0);
    Rng probe_rng(derive_seed(derive_seed(c.seed, kDpoStream), 0));
    const auto probe = dpo_examples(c, reference, pairs, all, probe_rng);
    auto probe_margin = [&] {
        autodiff::Tape tape(&result.params, false);
        train::DpoStats stats;
        train::dpo_objective(tape, ctx, probe, c.rl.beta_dpo, &stats);
        return stats;
    };
    json trace = json::array();
    const int every = std::max(1, c.finetune.steps / 4);
    auto record = [&](int step) {
        const auto s = probe_margin();
        trace.push_back({{"step", step}, {"loss", s.loss}, {"margin", s.margin}});
    };
    record(0);
    for (int step = 1; step <= c.finetune.steps; ++step) {
        Rng rng(derive_seed(derive_seed(c.seed, kDpoStream), static_cast<std::uint64_t>(step)));
        std::vector<std::size_t> chosen;
        for (int b = 0; b < c.finetune.batch; ++b) chosen.push_back(rng.index(pairs.size()));
        const auto batch = dpo_examples(c, reference, pairs, chosen, rng);
        train::DpoStats stats;
        net::LossAndGradients lg;
        try {
            lg = net::gradient(result.params, [&](autodiff::Tape& tape) {
                return train::dpo_objective(tape, ctx, batch, c.rl.beta_dpo, &stats);
            });
        } catch (const NumericError&) {
            save(c, result.params, out_dir);
            throw NumericError("DPO loss became non-finite at step " + std::to_string(step) +
                               "; last good parameters saved");
        }
        const double norm = opt.step(result.params, lg.grads);
        metrics.row(step, lg.loss, norm, {stats.margin});
        if (step % every == 0 || step == c.finetune.steps) record(step);
    }
    save(c, result.params, out_dir);
    result.summary = {{"command", "train-dpo"}, {"steps", c.finetune.steps}, {"pairs", pairs.size()},
                      {"beta_dpo", c.rl.beta_dpo}, {"margin_trace", trace},
                      {"initial_margin", trace.front()["margin"]}, {"final_margin", trace.back()["margin"]},
                      {"wall_seconds", seconds_since(start)}};
    write_json(out_dir / kSummaryFile, result.summary);
    return result;
}

PairedEvaluation paired_evaluation(const config::RunConfig& c, const net::ParameterStore& reference,
                                   const net::ParameterStore& policy, int samples, std::uint64_t seed) {
    PairedEvaluation out;
    if (samples <= 0) return out;
    config::RunConfig e = c;
    e.sample.n = samples;
    auto mean_reward = [&](const net::ParameterStore& params) {
        const auto rewards = generate(e, params, seed).rewards;
        double total = 0.0;
        for (double r : rewards) total += r;
        return total / static_cast<double>(rewards.size());
    };
    out.reference = mean_reward(reference);
    out.policy = mean_reward(policy);
    return out;
}

GrpoIteration grpo_iteration(const config::RunConfig& c, const net::ParameterStore& policy,
                             const net::ParameterStore& reference, Rng& rng) {
    const auto ctx = context(c);
    const auto dim = latent_dim(c);
    const auto times = c.schedule.times();
    const std::size_t g = static_cast<std::size_t>(c.rl.group_size);
    const auto oracle = chunked(net::make_oracle(policy, c.model, c.geometry(), ctx.options));
    std::vector<std::vector<sampler::Trajectory>> rollouts;
    std::vector<train::GrpoGroup> groups;
    double reward_sum = 0.0;
    for (int p = 0; p < c.finetune.batch; ++p) {
        const std::size_t prompt = rng.index(prompt_count(c));
        const std::vector<sampler::Condition> conds(g, prompt_condition(c, prompt));
        rollouts.push_back(sampler::sample_group(oracle, conds, dim, c.schedule, rng.next_u64()));
        const auto& trajs = rollouts.back();
        std::vector<double> rewards;
        for (const auto& t : trajs) rewards.push_back(task_reward(c, prompt, t.states.back()).value_or(0.0));
        reward_sum += std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(g);

        train::GrpoGroup group;
        group.advantages = preference::group_advantages(rewards);
        std::vector<net::ModelInput> ref_inputs;
        for (const auto& t : trajs) {
            std::vector<train::GrpoStep> steps;
            for (int k = 0; k < c.schedule.steps; ++k) {
                const auto kk = static_cast<std::size_t>(k);
                train::GrpoStep s;
                s.input = {conds[0].tokens, t.states[kk], conds[0].image, times[kk]};
                s.next = &t.states[kk + 1];
                s.dt = times[kk + 1] - times[kk];
                s.sigma = c.schedule.sigma_at(times[kk]);
                s.old_logprob = t.logprobs[kk];
                ref_inputs.push_back(s.input);
                steps.push_back(std::move(s));
            }
            group.steps.push_back(std::move(steps));
        }
        const auto v_ref = chunked([&](std::span<const Latent> xs, std::span<const double> ts,
                                       std::span<const sampler::Condition> cs) {
            return net::predict(reference, c.model, c.geometry(), train::make_inputs(xs, ts, cs), ctx.options);
        });
        std::vector<Latent> xs;
        std::vector<double> ts;
        std::vector<sampler::Condition> cs;
        for (const auto& in : ref_inputs) {
            xs.push_back(in.image);
            ts.push_back(in.t);
            cs.push_back({in.tokens, in.condition});
        }
        const auto refs = v_ref(xs, ts, cs);
        std::size_t r = 0;
        for (auto& traj : group.steps) {
            for (auto& s : traj) s.v_ref = refs[r++];
        }
        groups.push_back(std::move(group));
    }

    // Groups are differentiated one at a time to bound tape memory.
    GrpoIteration out;
    net::Gradients& grads = out.grads;
    train::GrpoStats total;
    const double weight = 1.0 / static_cast<double>(groups.size());
    for (const auto& group : groups) {
        train::GrpoStats stats;
        net::LossAndGradients lg;
        try {
            lg = net::gradient(policy, [&](autodiff::Tape& tape) {
                return train::grpo_objective(tape, ctx, std::span<const train::GrpoGroup>(&group, 1), c.rl,
                                             &stats);
            });
        } catch (const NumericError&) {
            throw NumericError("GRPO objective became non-finite");
        }
        for (auto& [name, gm] : lg.grads) {
            auto [it, fresh] = grads.try_emplace(name, weight * gm);
            if (!fresh) it->second += weight * gm;
        }
        total.loss += weight * stats.loss;
        total.mean_kl += weight * stats.mean_kl;
        total.clip_fraction += weight * stats.clip_fraction;
    }
    out.loss = total.loss;
    out.mean_kl = total.mean_kl;
    out.clip_fraction = total.clip_fraction;
    out.mean_reward = reward_sum / static_cast<double>(groups.size());
    return out;
}

TrainResult train_grpo(const config::RunConfig& c, const net::ParameterStore& reference, const fs::path& out_dir,
                       const RunOptions& options) {
    c.validate();
    if (c.task == Task::kMixture) throw ConfigError("train-grpo needs a task with a reward (glyph or edit)");
    if (!(c.schedule.sigma > 0.0)) throw ConfigError("train-grpo needs schedule.sigma > 0");
    const auto start = Clock::now();
    prepare_output(c, out_dir);
    TrainResult result;
    result.params = reference;
    config::OptimizerConfig oc = c.optimizer;
    oc.lr = c.finetune.lr;
    train::Optimizer opt(oc, c.finetune.steps);
    MetricsWriter metrics(out_dir / kMetricsFile, {"mean_reward", "mean_kl", "clip_fraction"}, options.wall_clock);
    const std::uint64_t stream = derive_seed(c.seed, kGrpoStream);

    double kl_total = 0.0, reward_total = 0.0;
    for (int step = 1; step <= c.finetune.steps; ++step) {
        Rng rng(derive_seed(stream, static_cast<std::uint64_t>(step)));
        GrpoIteration it;
        try {
            it = grpo_iteration(c, result.params, reference, rng);
        } catch (const NumericError&) {
            save(c, result.params, out_dir);
            throw NumericError("GRPO objective became non-finite at step " + std::to_string(step) +
                               "; last good parameters saved");
        }
        const double norm = opt.step(result.params, it.grads);
        metrics.row(step, it.loss, norm, {it.mean_reward, it.mean_kl, it.clip_fraction});
        kl_total += it.mean_kl;
        reward_total += it.mean_reward;
    }
    save(c, result.params, out_dir);
    const auto eval = paired_evaluation(c, reference, result.params, c.finetune.eval_samples,
                                        derive_seed(c.seed, kEvalStream));
    const double iters = std::max(1, c.finetune.steps);
    result.summary = {{"command", "train-grpo"},
                      {"steps", c.finetune.steps},
                      {"beta_kl", c.rl.beta_kl},
                      {"mean_kl", kl_total / iters},
                      {"mean_train_reward", reward_total / iters},
                      {"eval_samples", c.finetune.eval_samples},
                      {"reference_reward", eval.reference},
                      {"policy_reward", eval.policy},
                      {"improvement", eval.policy - eval.reference},
                      {"wall_seconds", seconds_since(start)}};
    write_json(out_dir / kSummaryFile, result.summary);
    return result;
}

json gradcheck(const config::RunConfig& c, const GradcheckOptions& options) {
    c.validate();
    Rng rng(derive_seed(c.seed, kCheckStream));
    auto ctx = context(c);

    // Every parameter perturbed away from its initial value so that no path
    // through the network is switched off (the output projection starts at 0).
    net::ParameterStore params = net::init_parameters(c.model, derive_seed(c.seed, kInitStream));
    const net::ParameterStore reference = params;
    for (auto& [name, m] : params) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.05 * rng.normal();
    }

    // FM batch.
    config::RunConfig small = c;
    small.optimizer.batch_size = 2;
    const auto fm = fm_batch(fm_payload(small, rng));

    // DPO batch: each prompt's target against another prompt's target.
    std::vector<preference::PreferencePair> pairs;
    for (std::size_t i = 0; i < 2; ++i) {
        const std::size_t a = rng.index(prompt_count(c));
        const std::size_t b = (a + 1) % std::max<std::size_t>(prompt_count(c), 2);
        pairs.push_back({prompt_condition(c, a), prompt_target(c, a, &rng), prompt_target(c, b, &rng)});
    }
    const auto dpo = dpo_examples(c, reference, pairs, {0, 1}, rng);

    // GRPO group: two short SDE rollouts from the perturbed model.
    sampler::NoiseSchedule schedule = c.schedule;
    schedule.steps = 2;
    if (!(schedule.sigma > 0.0)) schedule.sigma = 0.3;
    const auto cond = prompt_condition(c, rng.index(prompt_count(c)));
    const std::vector<sampler::Condition> conds(2, cond);
    const auto trajs = sampler::sample_group(net::make_oracle(params, c.model, c.geometry(), ctx.options), conds,
                                             latent_dim(c), schedule, rng.next_u64());
    const auto times = schedule.times();
    train::GrpoGroup group;
    group.advantages = {1.0, -1.0};
    for (std::size_t i = 0; i < trajs.size(); ++i) {
        std::vector<train::GrpoStep> steps;
        for (std::size_t k = 0; k + 1 < times.size(); ++k) {
            train::GrpoStep s;
            s.input = {cond.tokens, trajs[i].states[k], cond.image, times[k]};
            s.next = &trajs[i].states[k + 1];
            s.dt = times[k + 1] - times[k];
            s.sigma = schedule.sigma;
            // Offsets keep the ratios away from 1 but inside the clip range.
            s.old_logprob = trajs[i].logprobs[k] + (k % 2 == 0 ? 0.05 : -0.05);
            s.v_ref = net::predict(reference, c.model, c.geometry(), std::span(&s.input, 1), ctx.options)[0];
            steps.push_back(std::move(s));
        }
        group.steps.push_back(std::move(steps));
    }
    preference::RLConfig rl = c.rl;
    if (!(rl.beta_kl > 0.0)) rl.beta_kl = 0.01;

    const std::vector<std::pair<std::string, net::LossClosure>> losses = {
        {"fm", [&](autodiff::Tape& t) { return train::fm_objective(t, ctx, fm.inputs, fm.targets); }},
        {"dpo", [&](autodiff::Tape& t) { return train::dpo_objective(t, ctx, dpo, rl.beta_dpo); }},
        {"grpo",
         [&](autodiff::Tape& t) { return train::grpo_objective(t, ctx, std::span(&group, 1), rl); }},
    };

    // Coordinates drawn uniformly over all parameter entries.
    std::vector<std::pair<std::string, Eigen::Index>> entries;
    std::vector<std::pair<std::string, Eigen::Index>> sizes;
    Eigen::Index total = 0;
    for (const auto& [name, m] : params) {
        sizes.emplace_back(name, m.size());
        total += m.size();
    }
    for (int s = 0; s < options.samples; ++s) {
        auto pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(total)));
        for (const auto& [name, size] : sizes) {
            if (pick < size) {
                entries.emplace_back(name, pick);
                break;
            }
            pick -= size;
        }
    }

    json report = json::object();
    bool pass = true;
    for (const auto& [label, closure] : losses) {
        auto analytic = net::gradient(params, closure);
        if (options.corrupt) {
            for (auto& [name, gm] : analytic.grads) gm *= 1.01;
        }
        auto value = [&](net::ParameterStore& p) {
            autodiff::Tape tape(&p, false);
            return closure(tape).value()(0, 0);
        };
        double worst = 0.0;
        for (const auto& [name, index] : entries) {
            double& x = params.at(name).data()[index];
            const double saved = x;
            x = saved + options.step;
            const double up = value(params);
            x = saved - options.step;
            const double down = value(params);
            x = saved;
            const double numeric = (up - down) / (2.0 * options.step);
            const double a = analytic.grads.at(name).data()[index];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
            worst = std::max(worst, err);
        }
        const bool ok = worst < options.threshold;
        pass = pass && ok;
        report[label] = {{"max_rel_error", worst}, {"checked", entries.size()}, {"loss", analytic.loss}, {"pass", ok}};
    }
    report["threshold"] = options.threshold;
    report["step"] = options.step;
    report["pass"] = pass;
    return report;
}

}  // namespace flowlab::commands
