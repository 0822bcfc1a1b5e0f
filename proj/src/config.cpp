// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/config.hpp"

#include <fstream>
#include <set>

#include "flowlab/tasks.hpp"

namespace flowlab::config {
namespace {

// Reads the members of one JSON object, rejecting unknown keys and values of
// the wrong type.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError(name_ + " must be a JSON object");
    }

    template <class T>
    void get(const char* key, T& out) {
        used_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<T>) {
                if (!it->is_number_integer()) throw ConfigError("");
                if constexpr (std::is_unsigned_v<T>) {
                    if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0) {
                        throw ConfigError("");
                    }
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!it->is_number()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) throw ConfigError("");
            }
            out = it->template get<T>();
        } catch (const std::exception&) {
            throw ConfigError(name_ + "." + key + " has the wrong type");
        }
    }

    const json* child(const char* key) {
        used_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!used_.contains(key)) throw ConfigError("unknown config key " + name_ + "." + key);
        }
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> used_;
};

positional::RopeConfig rope_in(const json& j, positional::RopeConfig c) {
    Section s(j, "model.rope");
    s.get("head_dim", c.head_dim);
    if (const auto* split = s.child("axis_split")) {
        if (!split->is_array() || split->size() != 3) throw ConfigError("model.rope.axis_split must be 3 integers");
        for (std::size_t i = 0; i < 3; ++i) {
            if (!(*split)[i].is_number_integer()) throw ConfigError("model.rope.axis_split must be 3 integers");
            c.axis_split[i] = (*split)[i].get<int>();
        }
    }
    s.get("base", c.base);
    s.finish();
    return c;
}

net::ModelConfig model_in(const json& j, net::ModelConfig c) {
    Section s(j, "model");
    s.get("layers", c.layers);
    s.get("heads", c.heads);
    s.get("head_dim", c.head_dim);
    s.get("hidden", c.hidden);
    s.get("ffn_mult", c.ffn_mult);
    s.get("patch", c.patch);
    s.get("vocab", c.vocab);
    s.get("channels", c.channels);
    if (const auto* rope = s.child("rope")) c.rope = rope_in(*rope, c.rope);
    s.finish();
    return c;
}

int task_vocab(Task task) {
    switch (task) {
        case Task::kMixture: return 1;
        case Task::kGlyph: return static_cast<int>(tasks::GlyphSpec::standard().charset.size());
        case Task::kEdit: return static_cast<int>(tasks::kEditOps.size());
    }
    return 1;
}

}  // namespace

std::string to_string(Task task) {
    switch (task) {
        case Task::kMixture: return "mixture";
        case Task::kGlyph: return "glyph";
        case Task::kEdit: return "edit";
    }
    throw ConfigError("unknown task");
}

Task task_from_string(const std::string& name) {
    for (auto t : {Task::kMixture, Task::kGlyph, Task::kEdit}) {
        if (to_string(t) == name) return t;
    }
    throw ConfigError("unknown task '" + name + "' (expected mixture, glyph or edit)");
}

void OptimizerConfig::validate() const {
    if (name != "adam" && name != "sgd") throw ConfigError("optimizer.name must be adam or sgd");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer.lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optimizer.beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer.beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("optimizer.eps must be positive");
    if (!(grad_clip >= 0.0)) throw ConfigError("optimizer.grad_clip must be >= 0");
    if (batch_size < 1) throw ConfigError("optimizer.batch_size must be >= 1");
    if (schedule != "constant" && schedule != "cosine") {
        throw ConfigError("optimizer.schedule must be constant or cosine");
    }
    if (warmup < 0) throw ConfigError("optimizer.warmup must be >= 0");
}

void SampleConfig::validate() const {
    if (mode != "ode" && mode != "sde") throw ConfigError("sample.mode must be ode or sde");
    if (n < 0) throw ConfigError("sample.n must be >= 0");
    if (steps < 1) throw ConfigError("sample.steps must be >= 1");
}

void FinetuneConfig::validate() const {
    if (steps < 0) throw ConfigError("finetune.steps must be >= 0");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("finetune.lr must be positive");
    if (batch < 1) throw ConfigError("finetune.batch must be >= 1");
    if (eval_samples < 0) throw ConfigError("finetune.eval_samples must be >= 0");
}

void RunConfig::validate() const {
    model.validate();
    schedule.validate();
    rl.validate();
    timestep.validate();
    pipeline.validate();
    optimizer.validate();
    sample.validate();
    finetune.validate();
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
    for (const auto& b : pipeline.buckets) {
        if (b.height % model.patch != 0 || b.width % model.patch != 0) {
            throw ConfigError("model.patch must divide bucket " + b.str());
        }
    }
    if (model.vocab < task_vocab(task)) {
        throw ConfigError("model.vocab must be >= " + std::to_string(task_vocab(task)) + " for task " +
                          to_string(task));
    }
    switch (task) {
        case Task::kMixture:
            if (model.channels != 2) throw ConfigError("mixture task needs model.channels = 2");
            for (const auto& b : pipeline.buckets) {
                if (b.height != 1 || b.width != 1) throw ConfigError("mixture task needs the 1x1 bucket");
            }
            break;
        case Task::kGlyph:
        case Task::kEdit: {
            const int side = tasks::GlyphSpec::standard().canvas;
            if (model.channels != 1) throw ConfigError("glyph tasks need model.channels = 1");
            for (const auto& b : pipeline.buckets) {
                if (b.height != side || b.width != side) {
                    throw ConfigError("glyph tasks render on the " + std::to_string(side) + "x" +
                                      std::to_string(side) + " bucket only");
                }
            }
            break;
        }
    }
    if (task == Task::kEdit && model.rope.axis_split[0] < 1) {
        throw ConfigError("edit task needs frame channels in model.rope.axis_split");
    }
}

net::ImageGeometry RunConfig::geometry() const {
    return {pipeline.buckets.front().height, pipeline.buckets.front().width};
}

RunConfig default_config(Task task) {
    RunConfig c;
    c.task = task;
    switch (task) {
        case Task::kMixture:
            c.model.channels = 2;
            c.model.patch = 1;
            c.model.vocab = 1;
            c.model.layers = 2;
            c.pipeline.buckets = {{1, 1}};
            c.optimizer.lr = 1e-3;
            c.optimizer.batch_size = 256;
            c.steps = 1500;
            c.sample.n = 2000;
            c.sample.steps = 50;
            break;
        case Task::kGlyph:
            c.model.vocab = task_vocab(task);
            c.optimizer.lr = 1e-3;
            c.optimizer.batch_size = 16;
            c.steps = 300;
            c.sample.n = 256;
            c.sample.steps = 50;
            c.finetune.steps = 150;
            c.finetune.lr = 1e-4;
            break;
        case Task::kEdit:
            c.model.vocab = task_vocab(task);
            c.model.rope = positional::RopeConfig::with_frames(c.model.head_dim);
            c.optimizer.lr = 1e-3;
            c.optimizer.batch_size = 16;
            c.steps = 1000;
            c.sample.n = 64;
            c.sample.steps = 50;
            break;
    }
    return c;
}

json to_json(const positional::RopeConfig& c) {
    return {{"head_dim", c.head_dim},
            {"axis_split", {c.axis_split[0], c.axis_split[1], c.axis_split[2]}},
            {"base", c.base}};
}

json to_json(const net::ModelConfig& c) {
    return {{"layers", c.layers},   {"heads", c.heads},       {"head_dim", c.head_dim},
            {"hidden", c.hidden},   {"ffn_mult", c.ffn_mult}, {"patch", c.patch},
            {"vocab", c.vocab},     {"channels", c.channels}, {"rope", to_json(c.rope)}};
}

json to_json(const sampler::NoiseSchedule& c) {
    return {{"steps", c.steps}, {"eps", c.eps}, {"sigma", c.sigma}};
}

json to_json(const flowcore::TimestepDist& c) { return {{"loc", c.loc}, {"scale", c.scale}}; }

json to_json(const preference::RLConfig& c) {
    return {{"beta_dpo", c.beta_dpo}, {"beta_kl", c.beta_kl}, {"clip_eps", c.clip_eps}, {"group_size", c.group_size}};
}

json to_json(const pipeline::PipelineConfig& c) {
    json buckets = json::array();
    for (const auto& b : c.buckets) buckets.push_back(b.str());
    return {{"producers", c.producers}, {"capacity", c.capacity}, {"buckets", buckets}};
}

json to_json(const OptimizerConfig& c) {
    return {{"name", c.name},   {"lr", c.lr},   {"beta1", c.beta1},           {"beta2", c.beta2},
            {"eps", c.eps},     {"grad_clip", c.grad_clip}, {"schedule", c.schedule}, {"warmup", c.warmup},
            {"batch_size", c.batch_size}};
}

json to_json(const SampleConfig& c) { return {{"mode", c.mode}, {"n", c.n}, {"steps", c.steps}}; }

json to_json(const FinetuneConfig& c) {
    return {{"steps", c.steps}, {"lr", c.lr}, {"batch", c.batch}, {"eval_samples", c.eval_samples}};
}

json to_json(const RunConfig& c) {
    return {{"task", to_string(c.task)},
            {"model", to_json(c.model)},
            {"schedule", to_json(c.schedule)},
            {"rl", to_json(c.rl)},
            {"timestep", to_json(c.timestep)},
            {"pipeline", to_json(c.pipeline)},
            {"optimizer", to_json(c.optimizer)},
            {"sample", to_json(c.sample)},
            {"finetune", to_json(c.finetune)},
            {"seed", c.seed},
            {"steps", c.steps},
            {"out_dir", c.out_dir}};
}

positional::RopeConfig rope_from_json(const json& j) {
    auto c = rope_in(j, positional::RopeConfig{});
    c.validate();
    return c;
}

net::ModelConfig model_from_json(const json& j) {
    auto c = model_in(j, net::ModelConfig{});
    c.validate();
    return c;
}

RunConfig run_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    Task task = Task::kGlyph;
    if (const auto it = j.find("task"); it != j.end()) {
        if (!it->is_string()) throw ConfigError("task must be a string");
        task = task_from_string(it->get<std::string>());
    }
    RunConfig c = default_config(task);
    Section s(j, "config");
    s.child("task");
    if (const auto* m = s.child("model")) c.model = model_in(*m, c.model);
    if (const auto* sc = s.child("schedule")) {
        Section x(*sc, "schedule");
        x.get("steps", c.schedule.steps);
        x.get("eps", c.schedule.eps);
        x.get("sigma", c.schedule.sigma);
        x.finish();
    }
    if (const auto* rl = s.child("rl")) {
        Section x(*rl, "rl");
        x.get("beta_dpo", c.rl.beta_dpo);
        x.get("beta_kl", c.rl.beta_kl);
        x.get("clip_eps", c.rl.clip_eps);
        x.get("group_size", c.rl.group_size);
        x.finish();
    }
    if (const auto* ts = s.child("timestep")) {
        Section x(*ts, "timestep");
        x.get("loc", c.timestep.loc);
        x.get("scale", c.timestep.scale);
        x.finish();
    }
    if (const auto* p = s.child("pipeline")) {
        Section x(*p, "pipeline");
        x.get("producers", c.pipeline.producers);
        x.get("capacity", c.pipeline.capacity);
        if (const auto* b = x.child("buckets")) {
            if (!b->is_array()) throw ConfigError("pipeline.buckets must be an array of \"HxW\" strings");
            c.pipeline.buckets.clear();
            for (const auto& key : *b) {
                if (!key.is_string()) throw ConfigError("pipeline.buckets must be an array of \"HxW\" strings");
                c.pipeline.buckets.push_back(pipeline::BucketKey::parse(key.get<std::string>()));
            }
        }
        x.finish();
    }
    if (const auto* o = s.child("optimizer")) {
        Section x(*o, "optimizer");
        x.get("name", c.optimizer.name);
        x.get("lr", c.optimizer.lr);
        x.get("beta1", c.optimizer.beta1);
        x.get("beta2", c.optimizer.beta2);
        x.get("eps", c.optimizer.eps);
        x.get("grad_clip", c.optimizer.grad_clip);
        x.get("schedule", c.optimizer.schedule);
        x.get("warmup", c.optimizer.warmup);
        x.get("batch_size", c.optimizer.batch_size);
        x.finish();
    }
    if (const auto* sm = s.child("sample")) {
        Section x(*sm, "sample");
        x.get("mode", c.sample.mode);
        x.get("n", c.sample.n);
        x.get("steps", c.sample.steps);
        x.finish();
    }
    if (const auto* f = s.child("finetune")) {
        Section x(*f, "finetune");
        x.get("steps", c.finetune.steps);
        x.get("lr", c.finetune.lr);
        x.get("batch", c.finetune.batch);
        x.get("eval_samples", c.finetune.eval_samples);
        x.finish();
    }
    s.get("seed", c.seed);
    s.get("steps", c.steps);
    s.get("out_dir", c.out_dir);
    s.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    return run_from_json(j);
}

void require_same_model(const net::ModelConfig& expected, const net::ModelConfig& actual) {
    auto check = [](const char* field, auto a, auto b) {
        if (a != b) {
            throw ConfigMismatchError(field, "expected " + json(a).dump() + ", checkpoint has " + json(b).dump());
        }
    };
    check("layers", expected.layers, actual.layers);
    check("heads", expected.heads, actual.heads);
    check("head_dim", expected.head_dim, actual.head_dim);
    check("hidden", expected.hidden, actual.hidden);
    check("ffn_mult", expected.ffn_mult, actual.ffn_mult);
    check("patch", expected.patch, actual.patch);
    check("vocab", expected.vocab, actual.vocab);
    check("channels", expected.channels, actual.channels);
    check("rope.head_dim", expected.rope.head_dim, actual.rope.head_dim);
    check("rope.axis_split", expected.rope.axis_split, actual.rope.axis_split);
    check("rope.base", expected.rope.base, actual.rope.base);
}

}  // namespace flowlab::config
