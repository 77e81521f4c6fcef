#include "vig/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace vig {

static_assert(std::endian::native == std::endian::little,
              "dataset writer assumes a little-endian host");

void Dataset::validate() const {
  if (h < 1 || w < 1 || c != 3) throw ContractError("dataset: bad record geometry");
  if (images.size() != static_cast<size_t>(size()) * h * w * c)
    throw ContractError("dataset: pixel buffer size mismatch");
  for (uint16_t l : labels)
    if (l >= num_classes) throw IndexError("dataset: label out of range");
}

std::span<const uint8_t> Dataset::record(int64_t i) const {
  const size_t rec = static_cast<size_t>(h) * w * c;
  return {images.data() + static_cast<size_t>(i) * rec, rec};
}

namespace {
constexpr char kMagic[4] = {'V', 'I', 'G', 'D'};
constexpr uint8_t kVersion = 1;
}  // namespace

void save_vigd(const std::string& path, const Dataset& ds) {
  ds.validate();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open dataset for writing: " + path);
  f.write(kMagic, 4);
  f.put(static_cast<char>(kVersion));
  const auto count = static_cast<uint32_t>(ds.size());
  const auto h16 = static_cast<uint16_t>(ds.h), w16 = static_cast<uint16_t>(ds.w);
  const auto c8 = static_cast<uint8_t>(ds.c);
  const auto nc16 = static_cast<uint16_t>(ds.num_classes);
  f.write(reinterpret_cast<const char*>(&count), 4);
  f.write(reinterpret_cast<const char*>(&h16), 2);
  f.write(reinterpret_cast<const char*>(&w16), 2);
  f.write(reinterpret_cast<const char*>(&c8), 1);
  f.write(reinterpret_cast<const char*>(&nc16), 2);
  const size_t rec = static_cast<size_t>(ds.h) * ds.w * ds.c;
  for (int64_t i = 0; i < ds.size(); ++i) {
    f.write(reinterpret_cast<const char*>(ds.images.data() + i * rec),
            static_cast<std::streamsize>(rec));
    f.write(reinterpret_cast<const char*>(&ds.labels[static_cast<size_t>(i)]), 2);
  }
  if (!f) throw Error("dataset write failed: " + path);
}

Dataset load_vigd(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open dataset: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) throw Error("not a VIGD file: " + path);
  if (f.get() != kVersion) throw Error("unsupported VIGD version");
  uint32_t count = 0;
  uint16_t h16 = 0, w16 = 0, nc16 = 0;
  uint8_t c8 = 0;
  f.read(reinterpret_cast<char*>(&count), 4);
  f.read(reinterpret_cast<char*>(&h16), 2);
  f.read(reinterpret_cast<char*>(&w16), 2);
  f.read(reinterpret_cast<char*>(&c8), 1);
  f.read(reinterpret_cast<char*>(&nc16), 2);
  Dataset ds;
  ds.h = h16;
  ds.w = w16;
  ds.c = c8;
  ds.num_classes = nc16;
  const size_t rec = static_cast<size_t>(ds.h) * ds.w * ds.c;
  ds.images.resize(rec * count);
  ds.labels.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    f.read(reinterpret_cast<char*>(ds.images.data() + i * rec),
           static_cast<std::streamsize>(rec));
    f.read(reinterpret_cast<char*>(&ds.labels[i]), 2);
  }
  if (!f) throw Error("truncated VIGD file: " + path);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------

namespace {

// Inside test for shape class `cls` at offset (dx, dy) from the figure center,
// half-extent s. Classes: disc, square, triangle, cross, ring, diamond,
// saltire, hbar, vbar, corner-L.
bool shape_hit(int cls, double dx, double dy, double s) {
  const double t = 0.35 * s;
  switch (cls) {
    case 0: return dx * dx + dy * dy <= s * s;
    case 1: return std::max(std::abs(dx), std::abs(dy)) <= 0.9 * s;
    case 2:  // upward triangle
      return dy >= -0.8 * s && dy <= 0.8 * s &&
             std::abs(dx) <= 0.9 * s * (0.8 * s - dy) / (1.6 * s);
    case 3: return (std::abs(dx) <= t && std::abs(dy) <= s) ||
                   (std::abs(dy) <= t && std::abs(dx) <= s);
    case 4: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= s * s && r2 >= 0.55 * 0.55 * s * s;
    }
    case 5: return std::abs(dx) + std::abs(dy) <= 1.1 * s;
    case 6: return (std::abs(dx - dy) <= 1.2 * t || std::abs(dx + dy) <= 1.2 * t) &&
                   std::max(std::abs(dx), std::abs(dy)) <= s;
    case 7: return std::abs(dy) <= 1.2 * t && std::abs(dx) <= 1.1 * s;
    case 8: return std::abs(dx) <= 1.2 * t && std::abs(dy) <= 1.1 * s;
    case 9: return (dx >= -s && dx <= -s + 2 * t && std::abs(dy) <= s) ||
                   (dy >= s - 2 * t && dy <= s && std::abs(dx) <= s);
    default: throw ConfigError("synth_shapes: unsupported class id");
  }
}

}  // namespace

Dataset synth_shapes(int n, int resolution, int num_classes, uint64_t seed) {
  if (num_classes < 2 || num_classes > 10)
    throw ConfigError("synth_shapes: num_classes must lie in [2, 10]");
  if (n < 1 || resolution < 8) throw ConfigError("synth_shapes: bad n or resolution");
  Dataset ds;
  ds.h = ds.w = resolution;
  ds.c = 3;
  ds.num_classes = num_classes;
  ds.images.resize(static_cast<size_t>(n) * resolution * resolution * 3);
  ds.labels.resize(static_cast<size_t>(n));

  const double res = resolution;
  for (int i = 0; i < n; ++i) {
    const int cls = i % num_classes;  // interleaved => any prefix is stratified
    ds.labels[static_cast<size_t>(i)] = static_cast<uint16_t>(cls);
    Rng rng(seed + 0x9e3779b97f4a7c15ULL * (static_cast<uint64_t>(i) + 1));
    std::uniform_real_distribution<double> upos(0.32, 0.68);
    std::uniform_real_distribution<double> usize(0.16, 0.24);
    std::uniform_int_distribution<int> ubg(0, 100);
    std::uniform_int_distribution<int> ufg(140, 255);
    std::normal_distribution<double> noise(0.0, 18.0);
    const double cx = upos(rng) * res, cy = upos(rng) * res, s = usize(rng) * res;
    const int bg[3] = {ubg(rng), ubg(rng), ubg(rng)};
    const int fg[3] = {ufg(rng), ufg(rng), ufg(rng)};
    uint8_t* px = ds.images.data() + static_cast<size_t>(i) * resolution * resolution * 3;
    for (int y = 0; y < resolution; ++y)
      for (int x = 0; x < resolution; ++x) {
        const bool hit = shape_hit(cls, x + 0.5 - cx, y + 0.5 - cy, s);
        for (int ch = 0; ch < 3; ++ch) {
          const double v = (hit ? fg[ch] : bg[ch]) + noise(rng);
          px[(y * resolution + x) * 3 + ch] =
              static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
        }
      }
  }
  return ds;
}

// ---------------------------------------------------------------------------

Tensor batch_tensor(const Dataset& ds, std::span<const int64_t> indices, DType dt, bool augment,
                    Rng* rng, int crop_pad) {
  const auto b = static_cast<int64_t>(indices.size());
  Tensor out = Tensor::zeros({b, ds.h, ds.w, 3}, dt);
  std::uniform_int_distribution<int> flip(0, 1);
  std::uniform_int_distribution<int> shift(-crop_pad, crop_pad);
  for (int64_t bi = 0; bi < b; ++bi) {
    auto rec = ds.record(indices[static_cast<size_t>(bi)]);
    bool do_flip = false;
    int ox = 0, oy = 0;
    if (augment) {
      if (!rng) throw ContractError("batch_tensor: augmentation needs an rng");
      do_flip = flip(*rng) == 1;
      ox = shift(*rng);
      oy = shift(*rng);
    }
    with_dtype(dt, [&]<typename T>() {
      auto po = out.data<T>();
      for (int y = 0; y < ds.h; ++y)
        for (int x = 0; x < ds.w; ++x) {
          int sx = x + ox, sy = y + oy;  // zero padding outside
          if (do_flip) sx = ds.w - 1 - sx;
          for (int ch = 0; ch < 3; ++ch) {
            double v = 0.0;
            if (sx >= 0 && sx < ds.w && sy >= 0 && sy < ds.h)
              v = rec[(static_cast<size_t>(sy) * ds.w + sx) * 3 + ch];
            po[((bi * ds.h + y) * ds.w + x) * 3 + ch] = static_cast<T>(v / 127.5 - 1.0);
          }
        }
    });
  }
  return out;
}

std::vector<int> batch_labels(const Dataset& ds, std::span<const int64_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int64_t i : indices) out.push_back(ds.labels[static_cast<size_t>(i)]);
  return out;
}

}  // namespace vig
