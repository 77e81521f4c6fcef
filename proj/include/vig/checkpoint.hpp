#pragma once

#include <string>
#include <vector>

#include "vig/model.hpp"

namespace vig {

// Flat tensor archive:
//   "VIGC" | version u8 | manifest_len u32 LE | manifest JSON | records
// record: dtype u8 (1=f32, 2=f64) | rank u8 | extents u32 LE each | raw LE data
// The manifest lists {name, kind, offset} in write order; offsets are relative
// to the start of the record section.
struct CheckpointEntry {
  std::string name;
  std::string kind;  // "param" | "buffer"
  Tensor tensor;
};

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

// Model parameters plus BN running stats.
void save_checkpoint(const std::string& path, Model& m);
// Strict restore: every archive entry must match an existing tensor in name,
// dtype and shape, and every model tensor must be present.
void load_checkpoint(const std::string& path, Model& m);

}  // namespace vig
