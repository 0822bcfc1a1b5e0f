// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>

#include "flowlab/config.hpp"

namespace flowlab::checkpoint {
namespace {

constexpr char kMagic[4] = {'F', 'F', 'C', 'K'};

class Writer {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        out_.insert(out_.end(), p, p + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& data) : data_(data) {}

    const std::uint8_t* take(std::size_t n, const char* what) {
        if (n > data_.size() - pos_) {
            throw TruncatedCheckpointError(std::string("checkpoint truncated while reading ") + what);
        }
        const auto* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::uint32_t u32(const char* what) {
        const auto* p = take(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        const auto* p = take(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        return v;
    }
    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    const std::vector<std::uint8_t>& data_;
    std::size_t pos_ = 0;
};

std::uint64_t element_count(const std::vector<std::uint64_t>& shape) {
    std::uint64_t n = 1;
    for (auto d : shape) {
        if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) throw CheckpointError("tensor too large");
        n *= d;
    }
    return n;
}

}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& checkpoint) {
    Writer w;
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(checkpoint.header.size()));
    w.bytes(checkpoint.header.data(), checkpoint.header.size());
    w.u32(static_cast<std::uint32_t>(checkpoint.tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& t : checkpoint.tensors) {
        if (element_count(t.shape) != t.values.size()) {
            throw CheckpointError("tensor " + t.name + ": value count does not match its shape");
        }
        w.u32(static_cast<std::uint32_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) w.u64(d);
        w.u64(offset);
        offset += 4 * t.values.size();
    }
    for (const auto& t : checkpoint.tensors) {
        for (float v : t.values) w.u32(std::bit_cast<std::uint32_t>(v));
    }
    return w.take();
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
    const auto version = r.u32("version");
    if (version != kVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint out;
    const auto header_len = r.u32("header length");
    const auto* header = r.take(header_len, "header");
    out.header.assign(reinterpret_cast<const char*>(header), header_len);
    if (!config::json::accept(out.header)) throw CheckpointError("checkpoint header is not valid JSON");

    const auto count = r.u32("tensor count");
    std::vector<std::uint64_t> offsets;
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto name_len = r.u32("tensor name length");
        const auto* name = r.take(name_len, "tensor name");
        t.name.assign(reinterpret_cast<const char*>(name), name_len);
        if (!names.insert(t.name).second) throw CheckpointError("duplicate tensor " + t.name);
        const auto ndim = r.u32("tensor rank");
        if (ndim > 8) throw CheckpointError("tensor " + t.name + " has implausible rank");
        for (std::uint32_t d = 0; d < ndim; ++d) t.shape.push_back(r.u64("tensor shape"));
        offsets.push_back(r.u64("tensor offset"));
        out.tensors.push_back(std::move(t));
    }
    std::uint64_t expected = 0;
    for (std::size_t i = 0; i < out.tensors.size(); ++i) {
        auto& t = out.tensors[i];
        if (offsets[i] != expected) throw CheckpointError("tensor " + t.name + " has a non-contiguous offset");
        const auto n = element_count(t.shape);
        if (n > r.remaining() / 4) throw TruncatedCheckpointError("checkpoint truncated inside tensor " + t.name);
        t.values.resize(n);
        for (auto& v : t.values) v = std::bit_cast<float>(r.u32("tensor data"));
        expected += 4 * n;
    }
    if (r.remaining() != 0) throw CheckpointError("trailing bytes after the tensor blob");
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    const auto bytes = serialize(checkpoint);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

Checkpoint from_parameters(const net::ModelConfig& config, const net::ParameterStore& params) {
    Checkpoint out;
    out.header = config::json{{"format", "flowlab"}, {"model", config::to_json(config)}}.dump();
    for (const auto& [name, m] : params) {
        NamedTensor t;
        t.name = name;
        t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
        t.values.resize(static_cast<std::size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.size(); ++i) t.values[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
        out.tensors.push_back(std::move(t));
    }
    return out;
}

net::ModelConfig model_config(const Checkpoint& checkpoint) {
    const auto header = config::json::parse(checkpoint.header, nullptr, false);
    if (header.is_discarded() || !header.is_object() || !header.contains("model")) {
        throw CheckpointError("checkpoint header lacks a model config");
    }
    try {
        return config::model_from_json(header.at("model"));
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint model config is invalid: ") + e.what());
    }
}

net::ParameterStore to_parameters(const Checkpoint& checkpoint, const net::ModelConfig& expected) {
    config::require_same_model(expected, model_config(checkpoint));
    const auto shapes = net::parameter_shapes(expected);
    if (checkpoint.tensors.size() != shapes.size()) {
        throw CheckpointError("checkpoint has " + std::to_string(checkpoint.tensors.size()) + " tensors, model needs " +
                              std::to_string(shapes.size()));
    }
    net::ParameterStore out;
    for (const auto& t : checkpoint.tensors) {
        const auto it = shapes.find(t.name);
        if (it == shapes.end()) throw CheckpointError("unexpected tensor " + t.name);
        const auto [rows, cols] = it->second;
        if (t.shape.size() != 2 || t.shape[0] != static_cast<std::uint64_t>(rows) ||
            t.shape[1] != static_cast<std::uint64_t>(cols)) {
            throw CheckpointError("tensor " + t.name + " has the wrong shape");
        }
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = t.values[static_cast<std::size_t>(i)];
        out.emplace(t.name, std::move(m));
    }
    return out;
}

}  // namespace flowlab::checkpoint
