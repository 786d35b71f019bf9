#pragma once

#include <string>

#include <json.hpp>

#include "mudi/params.hpp"

namespace mudi {

// Single-file checkpoint container:
//   magic "MUDICKP1" | u64 manifest length | manifest JSON | raw f64 data (LE)
// The manifest records stage metadata, the config hash, and a parameter
// table (name, rows, cols, byte offset, FNV-64 checksum). Doubles are stored
// as raw bytes so save/load round-trips bit-exactly.

struct Checkpoint {
    std::string stage;         // "pretrain", "coherence", "generator"
    std::string config_hash;
    nlohmann::json meta;       // free-form stage metadata (dims, lambda, ...)
    ParamStore params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

} // namespace mudi
