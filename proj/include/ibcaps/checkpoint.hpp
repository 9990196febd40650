#pragma once

#include <map>
#include <string>
#include <vector>

#include "ibcaps/tensor.hpp"

namespace ibcaps {

// Versioned binary container: magic "IBCP", version u32, config block
// (u32 length + key=value text lines), then named tensors:
// name length u32, name bytes, dtype tag u8 (0 = f32), rank u8,
// dims u32 each, little-endian f32 payload. Everything little-endian.
struct CheckpointMeta {
    std::vector<std::pair<std::string, std::string>> kv;  // ordered, round-trip stable

    void set(const std::string& key, const std::string& value);
    const std::string* get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    long long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointMeta& meta,
                                            const std::vector<NamedTensor>& tensors);
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const std::vector<NamedTensor>& tensors);

struct LoadedCheckpoint {
    CheckpointMeta meta;
    std::vector<NamedTensor> tensors;
    const Tensor* find(const std::string& name) const;
};

LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                                   const std::string& origin = "checkpoint");
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace ibcaps
