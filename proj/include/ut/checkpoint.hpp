#pragma once

// Checkpoints are a JSON manifest (parameter names, shapes, byte offsets,
// config snapshot, step) next to a blob of little-endian float32 arrays
// concatenated in manifest order. Parameters are stored f32 and widened
// back to f64 on load.

#include <cstdint>
#include <string>

#include "ut/config.hpp"
#include "ut/model.hpp"

namespace ut {

// Writes <path_prefix>.json and <path_prefix>.bin.
void save_checkpoint(const Parameters& params, const RunConfig& cfg,
                     std::int64_t step, const std::string& path_prefix);

struct LoadedCheckpoint {
  Parameters params;
  RunConfig config;
  std::int64_t step = 0;
};

// `manifest_path` is the .json file; the blob is resolved relative to it.
// Rejects manifests whose offsets do not tile the blob exactly, and blobs
// of the wrong size.
LoadedCheckpoint load_checkpoint(const std::string& manifest_path);

}  // namespace ut
