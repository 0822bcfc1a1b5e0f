// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "flowlab/config.hpp"

using namespace flowlab;
using namespace flowlab::config;

TEST_CASE("task names") {
    for (auto t : {Task::kMixture, Task::kGlyph, Task::kEdit}) CHECK(task_from_string(to_string(t)) == t);
    CHECK(to_string(Task::kEdit) == "edit");
    CHECK_THROWS_AS(task_from_string("moons"), ConfigError);
}

TEST_CASE("defaults validate for every task") {
    for (auto t : {Task::kMixture, Task::kGlyph, Task::kEdit}) {
        const auto c = default_config(t);
        CHECK_NOTHROW(c.validate());
        CHECK(c.task == t);
    }
    const auto m = default_config(Task::kMixture);
    CHECK(m.model.channels == 2);
    CHECK(m.geometry().height == 1);
    const auto e = default_config(Task::kEdit);
    CHECK(e.model.rope.axis_split[0] > 0);
    CHECK(default_config(Task::kGlyph).model.rope.axis_split[0] == 0);
}

TEST_CASE("json round trip") {
    for (auto t : {Task::kMixture, Task::kGlyph, Task::kEdit}) {
        auto c = default_config(t);
        c.seed = 123456789012345ULL;
        c.schedule.sigma = 0.7;
        c.rl.beta_kl = 0.5;
        const json j = to_json(c);
        const auto back = run_from_json(j);
        CHECK(to_json(back) == j);
        CHECK(back.seed == c.seed);
    }
}

TEST_CASE("partial json overlays the task defaults") {
    const auto c = run_from_json(json::parse(R"({"task":"mixture","steps":7,"schedule":{"sigma":0.1}})"));
    CHECK(c.task == Task::kMixture);
    CHECK(c.steps == 7);
    CHECK(c.schedule.sigma == 0.1);
    CHECK(c.schedule.steps == default_config(Task::kMixture).schedule.steps);
    CHECK(c.model.channels == 2);
}

TEST_CASE("strict parsing") {
    CHECK_THROWS_AS(run_from_json(json::parse(R"({"task":"glyph","stpes":3})")), ConfigError);
    CHECK_THROWS_AS(run_from_json(json::parse(R"({"task":"glyph","model":{"layerz":3}})")), ConfigError);
    CHECK_THROWS_AS(run_from_json(json::parse(R"({"task":"glyph","steps":"3"})")), ConfigError);
    CHECK_THROWS_AS(run_from_json(json::parse(R"({"task":"glyph","steps":2.5})")), ConfigError);
    CHECK_THROWS_AS(run_from_json(json::parse(R"({"task":"glyph","model":[]})")), ConfigError);
    CHECK_THROWS_AS(run_from_json(json::parse(R"([1,2])")), ConfigError);
    CHECK_THROWS_AS(run_from_json(json::parse(R"({"task":"glyph","pipeline":{"buckets":["16by16"]}})")), ConfigError);
}

TEST_CASE("cross-block validation") {
    auto c = default_config(Task::kGlyph);
    c.model.vocab = 8;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_config(Task::kGlyph);
    c.pipeline.buckets = {{15, 15}};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_config(Task::kGlyph);
    c.model.channels = 2;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_config(Task::kMixture);
    c.model.channels = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_config(Task::kEdit);
    c.model.rope = positional::RopeConfig::without_frames(c.model.head_dim);
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_config(Task::kGlyph);
    c.steps = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_config(Task::kGlyph);
    c.sample.mode = "heun";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_config(Task::kGlyph);
    c.optimizer.name = "lion";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_config(Task::kGlyph);
    c.schedule.sigma = -0.1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = default_config(Task::kGlyph);
    c.rl.group_size = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("model comparison names the first differing field") {
    const auto a = default_config(Task::kGlyph).model;
    auto b = a;
    CHECK_NOTHROW(require_same_model(a, b));
    b.heads = 2;
    b.head_dim = 32;
    try {
        require_same_model(a, b);
        FAIL("expected mismatch");
    } catch (const ConfigMismatchError& e) {
        CHECK(e.field() == "heads");
    }
}
