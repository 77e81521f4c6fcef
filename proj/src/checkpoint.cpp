#include "vig/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace vig {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'V', 'I', 'G', 'C'};
constexpr uint8_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::string records;
  nlohmann::json manifest;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json je;
    je["name"] = e.name;
    je["kind"] = e.kind;
    je["offset"] = records.size();
    manifest["tensors"].push_back(je);

    records.push_back(static_cast<char>(e.tensor.dtype()));
    records.push_back(static_cast<char>(e.tensor.rank()));
    for (int64_t ext : e.tensor.shape()) put_u32(records, static_cast<uint32_t>(ext));
    with_dtype(e.tensor.dtype(), [&]<typename T>() {
      auto d = e.tensor.data<T>();
      records.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(T));
    });
  }

  const std::string mtext = manifest.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open checkpoint for writing: " + path);
  f.write(kMagic, 4);
  f.put(static_cast<char>(kVersion));
  std::string hdr;
  put_u32(hdr, static_cast<uint32_t>(mtext.size()));
  f.write(hdr.data(), 4);
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  f.write(records.data(), static_cast<std::streamsize>(records.size()));
  if (!f) throw Error("checkpoint write failed: " + path);
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw Error("not a ViG checkpoint: " + path);
  const int version = f.get();
  if (version != kVersion) throw Error("unsupported checkpoint version");
  uint32_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), 4);
  std::string mtext(mlen, '\0');
  f.read(mtext.data(), mlen);
  std::string records((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("corrupt checkpoint manifest: ") + e.what());
  }

  std::vector<CheckpointEntry> entries;
  for (const auto& je : manifest.at("tensors")) {
    CheckpointEntry e;
    e.name = je.at("name").get<std::string>();
    e.kind = je.at("kind").get<std::string>();
    size_t off = je.at("offset").get<size_t>();
    if (off + 2 > records.size()) throw Error("checkpoint record out of bounds: " + e.name);
    const auto dt = static_cast<DType>(records[off]);
    const int rank = static_cast<uint8_t>(records[off + 1]);
    off += 2;
    std::vector<int64_t> shape;
    for (int i = 0; i < rank; ++i) {
      uint32_t ext = 0;
      std::memcpy(&ext, records.data() + off, 4);
      shape.push_back(ext);
      off += 4;
    }
    Tensor t = Tensor::zeros(shape.empty() ? std::vector<int64_t>{1} : shape, dt);
    const size_t bytes = static_cast<size_t>(t.numel()) * dtype_size(dt);
    if (off + bytes > records.size()) throw Error("checkpoint data out of bounds: " + e.name);
    with_dtype(dt, [&]<typename T>() {
      std::memcpy(t.data<T>().data(), records.data() + off, bytes);
    });
    e.tensor = t;
    entries.push_back(std::move(e));
  }
  return entries;
}

void save_checkpoint(const std::string& path, Model& m) {
  std::vector<CheckpointEntry> entries;
  m.visit_params([&](const std::string& n, Tensor& t) { entries.push_back({n, "param", t}); });
  m.visit_buffers([&](const std::string& n, Tensor& t) { entries.push_back({n, "buffer", t}); });
  write_checkpoint(path, entries);
}

void load_checkpoint(const std::string& path, Model& m) {
  auto entries = read_checkpoint(path);
  std::map<std::string, Tensor*> slots;
  m.visit_params([&](const std::string& n, Tensor& t) { slots[n] = &t; });
  m.visit_buffers([&](const std::string& n, Tensor& t) { slots[n] = &t; });

  for (auto& e : entries) {
    auto it = slots.find(e.name);
    if (it == slots.end()) throw Error("checkpoint has unknown tensor '" + e.name + "'");
    Tensor& dst = *it->second;
    if (dst.dtype() != e.tensor.dtype() || dst.shape() != e.tensor.shape())
      throw Error("checkpoint tensor '" + e.name + "' has shape/dtype " +
                  e.tensor.shape_str() + " but model expects " + dst.shape_str());
    with_dtype(dst.dtype(), [&]<typename T>() {
      auto s = e.tensor.data<T>();
      auto d = dst.data<T>();
      std::copy(s.begin(), s.end(), d.begin());
    });
    slots.erase(it);
  }
  if (!slots.empty())
    throw Error("checkpoint is missing tensor '" + slots.begin()->first + "'");
}

}  // namespace vig
