// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Producer-consumer data pipeline. Producer threads synthesize training
// batches, tag them with a resolution bucket and push them into a bounded
// channel; the trainer pulls them. A full channel blocks its producers.

#pragma once

#include <compare>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "flowlab/common.hpp"

namespace flowlab::pipeline {

struct BucketKey {
    int height = 1;
    int width = 1;

    void validate() const;
    std::string str() const;  // "{height}x{width}"
    static BucketKey parse(const std::string& key);

    friend auto operator<=>(const BucketKey&, const BucketKey&) = default;
};

/// One preprocessed batch. Every latent has height * width * channels values.
struct Payload {
    std::vector<std::vector<int>> tokens;
    std::vector<Latent> latents;
    std::vector<Latent> conditions;  // empty unless the task is conditioned on an image
    std::vector<Latent> noises;
    std::vector<double> times;

    bool matches(const BucketKey& bucket, int channels) const;
};

struct WorkItem {
    std::uint64_t id = 0;
    int producer = 0;
    BucketKey bucket;
    Payload payload;
};

/// Transport between producers and the trainer.
class WorkChannel {
public:
    virtual ~WorkChannel() = default;
    /// Blocks while full. Returns false (dropping nothing the caller still
    /// owns) when the channel is closed or `stop` is requested.
    virtual bool push(WorkItem item, std::stop_token stop) = 0;
    /// Blocks while empty; nullopt once closed and drained.
    virtual std::optional<WorkItem> pop() = 0;
    virtual void close() = 0;
};

/// In-process bounded multi-producer single-consumer FIFO.
class BoundedChannel final : public WorkChannel {
public:
    explicit BoundedChannel(std::size_t capacity);

    bool push(WorkItem item, std::stop_token stop) override;
    std::optional<WorkItem> pop() override;
    void close() override;

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const;
    bool closed() const;
    /// Number of push calls that had to wait for space.
    std::uint64_t blocked_pushes() const;

private:
    const std::size_t capacity_;
    mutable std::mutex mutex_;
    std::condition_variable_any not_full_;
    std::condition_variable_any not_empty_;
    std::deque<WorkItem> items_;
    bool closed_ = false;
    std::uint64_t blocked_ = 0;
};

/// Builds the payload for item `id`; `rng` is seeded from (seed, id) only.
using PayloadFactory = std::function<Payload(const BucketKey& bucket, std::uint64_t id, Rng& rng)>;

struct ProducerSpec {
    int index = 0;  // this producer emits ids index, index + count, ...
    int count = 1;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> limit;  // ids stay below this; unbounded when unset
    PayloadFactory make;
};

/// Bucket of item `id`, drawn from the item's own stream.
BucketKey bucket_for(const std::vector<BucketKey>& buckets, std::uint64_t seed, std::uint64_t id);

/// Emits items until the id range is exhausted, the channel closes or `stop`
/// is requested. Returns the number of items delivered.
std::uint64_t producer_loop(const ProducerSpec& spec, const std::vector<BucketKey>& buckets, WorkChannel& queue,
                            std::stop_token stop);

/// Next item, or nullopt at end of stream.
std::optional<WorkItem> consume_batch(WorkChannel& queue);

struct PipelineConfig {
    int producers = 2;
    int capacity = 8;
    std::vector<BucketKey> buckets{{16, 16}};

    void validate() const;
};

/// Runs the producers for ids [0, limit) and hands items to a single
/// consumer in id order, whatever the thread interleaving.
class Pipeline {
public:
    Pipeline(const PipelineConfig& config, std::uint64_t seed, std::uint64_t limit, PayloadFactory make);
    ~Pipeline();

    Pipeline(const Pipeline&) = delete;
    Pipeline& operator=(const Pipeline&) = delete;

    std::optional<WorkItem> next();
    /// Requests stop, unblocks producers and joins them.
    void stop();

private:
    BoundedChannel channel_;
    std::vector<std::jthread> workers_;
    std::mutex done_mutex_;
    int running_ = 0;
    std::uint64_t next_id_ = 0;
    std::uint64_t limit_ = 0;
    std::map<std::uint64_t, WorkItem> pending_;
};

}  // namespace flowlab::pipeline
