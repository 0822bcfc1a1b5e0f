// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0
// Randomized producer/consumer stress run shared by the unit and acceptance tests.
#pragma once

#include <chrono>
#include <cstdint>
#include <future>
#include <string>
#include <thread>
#include <vector>

#include "flowlab/pipeline.hpp"

namespace flowlab::testing {

struct StressResult {
    bool ok = true;
    std::string detail;
};

inline const std::vector<pipeline::BucketKey>& stress_buckets() {
    static const std::vector<pipeline::BucketKey> buckets{{1, 1}, {2, 3}, {4, 4}};
    return buckets;
}

inline void maybe_sleep(Rng& rng) {
    if (rng.index(8) == 0) std::this_thread::sleep_for(std::chrono::microseconds(rng.index(20)));
}

/// `producers` threads emit ids [0, items) through a channel of `capacity`
/// while one consumer drains it, both sleeping at random. Checks exactly-once
/// delivery, per-producer order and bucket homogeneity, and fails if the run
/// does not finish within `timeout`.
inline StressResult pipeline_stress(std::uint64_t seed, int producers, std::size_t capacity, std::uint64_t items,
                                    std::chrono::seconds timeout = std::chrono::seconds(60)) {
    using namespace pipeline;
    BoundedChannel channel(capacity);
    const auto& buckets = stress_buckets();
    const PayloadFactory make = [](const BucketKey& bucket, std::uint64_t, Rng& rng) {
        maybe_sleep(rng);
        Payload p;
        p.tokens = {{1}};
        p.latents = {rng.normal_vector(bucket.height * bucket.width)};
        p.noises = {rng.normal_vector(bucket.height * bucket.width)};
        p.times = {0.5};
        return p;
    };

    auto consumer = std::async(std::launch::async, [&]() {
        StressResult r;
        Rng rng(derive_seed(seed, 999));
        std::vector<int> seen(items, 0);
        std::vector<std::int64_t> last(static_cast<std::size_t>(producers), -1);
        while (auto item = consume_batch(channel)) {
            maybe_sleep(rng);
            if (item->id >= items) {
                r.ok = false;
                r.detail = "id out of range";
                continue;
            }
            ++seen[item->id];
            const auto p = static_cast<std::size_t>(item->producer);
            if (p >= last.size() || item->id % static_cast<std::uint64_t>(producers) != p) {
                r.ok = false;
                r.detail = "item from unexpected producer";
                continue;
            }
            if (static_cast<std::int64_t>(item->id) <= last[p]) {
                r.ok = false;
                r.detail = "producer order violated";
            }
            last[p] = static_cast<std::int64_t>(item->id);
            if (!(item->bucket == bucket_for(buckets, seed, item->id)) || !item->payload.matches(item->bucket, 1)) {
                r.ok = false;
                r.detail = "payload does not match its bucket";
            }
        }
        for (std::uint64_t i = 0; i < items; ++i) {
            if (seen[i] != 1) {
                r.ok = false;
                r.detail = "id " + std::to_string(i) + " delivered " + std::to_string(seen[i]) + " times";
                break;
            }
        }
        return r;
    });

    std::vector<std::jthread> threads;
    std::vector<std::uint64_t> delivered(static_cast<std::size_t>(producers), 0);
    {
        std::mutex m;
        int running = producers;
        for (int i = 0; i < producers; ++i) {
            threads.emplace_back([&, i](std::stop_token stop) {
                ProducerSpec spec{i, producers, seed, items, make};
                delivered[static_cast<std::size_t>(i)] = producer_loop(spec, buckets, channel, stop);
                std::lock_guard lock(m);
                if (--running == 0) channel.close();
            });
        }
        if (consumer.wait_for(timeout) != std::future_status::ready) {
            for (auto& t : threads) t.request_stop();
            channel.close();
            return {false, "timed out (possible deadlock)"};
        }
        threads.clear();
    }
    StressResult r = consumer.get();
    std::uint64_t total = 0;
    for (auto d : delivered) total += d;
    if (r.ok && total != items) {
        r.ok = false;
        r.detail = "producers report " + std::to_string(total) + " deliveries";
    }
    return r;
}

}  // namespace flowlab::testing
