// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

// Portable parameter files.
//
// Layout (all integers little-endian):
//   "FFCK"            4-byte magic
//   u32 version       currently 1
//   u32 header_len    followed by header_len bytes of JSON text
//   u32 tensor_count  followed by, per tensor:
//       u32 name_len, name bytes, u32 ndim, u64 dims[ndim], u64 byte_offset
//   blob              float32 little-endian values; byte_offset is relative
//                     to the start of the blob

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flowlab/net.hpp"

namespace flowlab::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::vector<float> values;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
    std::string header;  // JSON text, kept verbatim so a reload saves identically
    std::vector<NamedTensor> tensors;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> serialize(const Checkpoint& checkpoint);
/// Throws TruncatedCheckpointError on short input and CheckpointError on any
/// other malformation; nothing is returned unless the whole buffer parses.
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

/// Writes through a temporary file and a rename, so an existing file is
/// replaced only by a complete one.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Packs parameters (rounded to float32) with the model config in the header.
Checkpoint from_parameters(const net::ModelConfig& config, const net::ParameterStore& params);

/// Model config recorded in the header.
net::ModelConfig model_config(const Checkpoint& checkpoint);

/// Unpacks parameters after checking the header config against `expected`
/// (ConfigMismatchError names the first differing field) and every tensor
/// shape against the model's parameter shapes.
net::ParameterStore to_parameters(const Checkpoint& checkpoint, const net::ModelConfig& expected);

}  // namespace flowlab::checkpoint
