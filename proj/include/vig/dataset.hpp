#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vig/ops.hpp"

namespace vig {

// Packed uint8 RGB image records of one resolution with class labels.
// Binary layout (VIGD):
//   "VIGD" | version u8 | count u32 | H u16 | W u16 | C u8 | num_classes u16
//   then count records of H*W*C pixel bytes followed by a u16 label. LE.
struct Dataset {
  int h = 0, w = 0, c = 3;
  int num_classes = 0;
  std::vector<uint8_t> images;
  std::vector<uint16_t> labels;
  std::string split;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  void validate() const;
  std::span<const uint8_t> record(int64_t i) const;
};

void save_vigd(const std::string& path, const Dataset& ds);
Dataset load_vigd(const std::string& path);

// Deterministic class-stratified generator of geometric-figure images
// (disc, square, triangle, cross, ring, diamond, saltire, bars, corner),
// random position / scale / colors / pixel noise. num_classes <= 10.
Dataset synth_shapes(int n, int resolution, int num_classes, uint64_t seed);

// Assemble a normalized float batch [B, H, W, 3] (mean 0.5, std 0.5). With
// `augment`, applies horizontal flip and zero-pad random crop per record.
Tensor batch_tensor(const Dataset& ds, std::span<const int64_t> indices, DType dt,
                    bool augment = false, Rng* rng = nullptr, int crop_pad = 2);
std::vector<int> batch_labels(const Dataset& ds, std::span<const int64_t> indices);

}  // namespace vig
