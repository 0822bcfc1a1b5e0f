// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/pipeline.hpp"

#include <charconv>
#include <set>
#include <utility>

namespace flowlab::pipeline {

void BucketKey::validate() const {
    if (height < 1 || width < 1) throw ConfigError("bucket " + str() + " must have positive dimensions");
}

std::string BucketKey::str() const { return std::to_string(height) + "x" + std::to_string(width); }

BucketKey BucketKey::parse(const std::string& key) {
    const auto x = key.find('x');
    auto number = [&](std::string_view s) {
        int v = 0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
            throw ConfigError("malformed bucket key '" + key + "'");
        }
        return v;
    };
    if (x == std::string::npos) throw ConfigError("malformed bucket key '" + key + "'");
    const std::string_view view(key);
    BucketKey out{number(view.substr(0, x)), number(view.substr(x + 1))};
    out.validate();
    return out;
}

bool Payload::matches(const BucketKey& bucket, int channels) const {
    const auto n = static_cast<Eigen::Index>(bucket.height) * bucket.width * channels;
    for (const auto& l : latents) {
        if (l.size() != n) return false;
    }
    for (const auto& l : conditions) {
        if (l.size() != n) return false;
    }
    for (const auto& l : noises) {
        if (l.size() != n) return false;
    }
    return true;
}

BoundedChannel::BoundedChannel(std::size_t capacity) : capacity_(capacity) {
    if (capacity < 1) throw ConfigError("channel capacity must be >= 1");
}

bool BoundedChannel::push(WorkItem item, std::stop_token stop) {
    std::unique_lock lock(mutex_);
    if (items_.size() >= capacity_ && !closed_) ++blocked_;
    if (!not_full_.wait(lock, stop, [&] { return closed_ || items_.size() < capacity_; })) return false;
    if (closed_) return false;
    items_.push_back(std::move(item));
    lock.unlock();
    not_empty_.notify_one();
    return true;
}

std::optional<WorkItem> BoundedChannel::pop() {
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    WorkItem item = std::move(items_.front());
    items_.pop_front();
    lock.unlock();
    not_full_.notify_one();
    return item;
}

void BoundedChannel::close() {
    {
        std::lock_guard lock(mutex_);
        closed_ = true;
    }
    not_full_.notify_all();
    not_empty_.notify_all();
}

std::size_t BoundedChannel::size() const {
    std::lock_guard lock(mutex_);
    return items_.size();
}

bool BoundedChannel::closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
}

std::uint64_t BoundedChannel::blocked_pushes() const {
    std::lock_guard lock(mutex_);
    return blocked_;
}

BucketKey bucket_for(const std::vector<BucketKey>& buckets, std::uint64_t seed, std::uint64_t id) {
    if (buckets.empty()) throw ConfigError("pipeline needs at least one bucket");
    if (buckets.size() == 1) return buckets.front();
    return buckets[derive_seed(seed ^ 0xB0C4E7ULL, id) % buckets.size()];
}

std::uint64_t producer_loop(const ProducerSpec& spec, const std::vector<BucketKey>& buckets, WorkChannel& queue,
                            std::stop_token stop) {
    if (spec.count < 1 || spec.index < 0 || spec.index >= spec.count) {
        throw ConfigError("producer index out of range");
    }
    std::uint64_t delivered = 0;
    for (std::uint64_t id = static_cast<std::uint64_t>(spec.index);; id += static_cast<std::uint64_t>(spec.count)) {
        if (spec.limit && id >= *spec.limit) break;
        if (stop.stop_requested()) break;
        WorkItem item;
        item.id = id;
        item.producer = spec.index;
        item.bucket = bucket_for(buckets, spec.seed, id);
        if (spec.make) {
            Rng rng(derive_seed(spec.seed, id));
            item.payload = spec.make(item.bucket, id, rng);
        }
        if (!queue.push(std::move(item), stop)) break;
        ++delivered;
    }
    return delivered;
}

std::optional<WorkItem> consume_batch(WorkChannel& queue) { return queue.pop(); }

void PipelineConfig::validate() const {
    if (producers < 1) throw ConfigError("pipeline.producers must be >= 1");
    if (capacity < 1) throw ConfigError("pipeline.capacity must be >= 1");
    if (buckets.empty()) throw ConfigError("pipeline.buckets must not be empty");
    std::set<BucketKey> seen;
    for (const auto& b : buckets) {
        b.validate();
        if (!seen.insert(b).second) throw ConfigError("pipeline bucket " + b.str() + " listed twice");
    }
}

Pipeline::Pipeline(const PipelineConfig& config, std::uint64_t seed, std::uint64_t limit, PayloadFactory make)
    : channel_((config.validate(), static_cast<std::size_t>(config.capacity))), limit_(limit) {
    running_ = config.producers;
    workers_.reserve(static_cast<std::size_t>(config.producers));
    for (int p = 0; p < config.producers; ++p) {
        ProducerSpec spec{p, config.producers, seed, limit, make};
        workers_.emplace_back([this, spec, buckets = config.buckets](std::stop_token stop) {
            producer_loop(spec, buckets, channel_, stop);
            std::lock_guard lock(done_mutex_);
            if (--running_ == 0) channel_.close();
        });
    }
}

Pipeline::~Pipeline() { stop(); }

std::optional<WorkItem> Pipeline::next() {
    if (next_id_ >= limit_) return std::nullopt;
    while (true) {
        if (auto it = pending_.find(next_id_); it != pending_.end()) {
            WorkItem item = std::move(it->second);
            pending_.erase(it);
            ++next_id_;
            return item;
        }
        auto item = channel_.pop();
        if (!item) return std::nullopt;
        pending_.emplace(item->id, std::move(*item));
    }
}

void Pipeline::stop() {
    for (auto& w : workers_) w.request_stop();
    channel_.close();
    for (auto& w : workers_) {
        if (w.joinable()) w.join();
    }
}

}  // namespace flowlab::pipeline
