// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sisma/core/tensor.hpp"
#include "sisma/nn/params.hpp"

namespace sisma::model {

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

enum class EntryDtype : u8 { F32 = 0, F64 = 1 };

// One named array. Values are held widened to double in memory; the dtype
// records the on-disk width, and float payloads survive the round trip
// bit-exactly because widening is lossless.
struct CkptEntry {
    std::string name;
    EntryDtype dtype = EntryDtype::F64;
    std::vector<i64> shape;
    std::vector<double> data;
};

struct Checkpoint {
    u16 version = kCkptVersion;
    u64 config_fingerprint = 0;
    i64 step = 0;
    std::vector<CkptEntry> entries;

    static constexpr u16 kCkptVersion = 1;

    // Sorted lookup; returns nullptr when absent.
    const CkptEntry* find(const std::string& name) const;
};

// Single-file archive: magic "SISMA-CKPT", version u16, fingerprint u64,
// step i64, name-sorted entry table (name, dtype, shape, offset, length),
// payload blob, trailing payload checksum. Little-endian throughout.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// registry bridging
// ---------------------------------------------------------------------------

// Copies every parameter in the registry into entries named prefix + name.
template <typename T>
void append_registry_entries(Checkpoint& ckpt, const nn::ParamRegistry<T>& reg,
                             const std::string& prefix);

// Writes entries named prefix + name back into the registry parameters.
// Missing entry or shape mismatch raises IntegrityError naming the entry.
template <typename T>
void load_registry_entries(const Checkpoint& ckpt, const nn::ParamRegistry<T>& reg,
                           const std::string& prefix);

} // namespace sisma::model
