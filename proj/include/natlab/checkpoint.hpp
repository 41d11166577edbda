#pragma once

// Binary checkpoint: magic "NATLAB1", then per tensor
//   u32 name length, name bytes, u32 rank, u32 dims[rank], f32 values (row-major)
// all little-endian, until end of file. A key=value manifest with the model
// configuration sits next to it as <file>.manifest.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "natlab/kv_file.hpp"
#include "natlab/model.hpp"

namespace natlab {

inline constexpr char kCheckpointMagic[] = "NATLAB1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}
  bool done() const { return pos_ == data_.size(); }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated file");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::filesystem::path manifest_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".manifest";
  return p;
}

/// Serializes parameters in layout order.
template <typename T>
std::string encode_checkpoint(const Parameters<T>& p) {
  std::string out(kCheckpointMagic, 7);
  for (const auto& t : p.layout->tensors()) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.size(); ++i) detail::put_f32(out, static_cast<float>(p.values[t.offset + i]));
  }
  return out;
}

/// `extra` is appended to the manifest after the model configuration.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Parameters<T>& p, const KvRecord& extra = {}) {
  if (path.has_parent_path()) ensure_directory(path.parent_path());
  KvRecord manifest;
  manifest.set("format", "NATLAB1");
  p.config().write(manifest);
  for (const auto& [k, v] : extra.entries()) manifest.set(k, v);
  write_file_atomic(path, encode_checkpoint(p));
  write_file_atomic(manifest_path(path), manifest.to_string());
}

struct LoadedCheckpoint {
  Parameters<float> params;
  KvRecord manifest;
};

/// Reads a checkpoint and its manifest; every tensor of the configured
/// layout must be present with the expected shape.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  LoadedCheckpoint out;
  out.manifest = read_kv_file(manifest_path(path));
  const auto cfg = ModelConfig::read(out.manifest);
  auto layout = std::make_shared<const ModelLayout>(cfg);

  detail::ByteReader in(read_text_file(path));
  if (in.bytes(7) != std::string(kCheckpointMagic, 7)) throw CheckpointError("checkpoint: bad magic in " + path.string());
  std::map<std::string, std::pair<std::vector<int>, std::vector<float>>> tensors;
  while (!in.done()) {
    auto name = in.bytes(in.u32());
    const auto rank = in.u32();
    if (rank > 8) throw CheckpointError("checkpoint: implausible rank for " + name);
    std::vector<int> shape;
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(static_cast<int>(in.u32()));
      n *= static_cast<std::size_t>(shape.back());
    }
    std::vector<float> values(n);
    for (auto& v : values) v = in.f32();
    tensors[std::move(name)] = {std::move(shape), std::move(values)};
  }

  out.params = Parameters<float>{layout, AlignedVector<float>(layout->total())};
  for (const auto& t : layout->tensors()) {
    const auto it = tensors.find(t.name);
    if (it == tensors.end()) throw CheckpointError("checkpoint: missing tensor " + t.name);
    if (it->second.first != t.shape) throw CheckpointError("checkpoint: shape mismatch for " + t.name);
    std::copy(it->second.second.begin(), it->second.second.end(), out.params.values.begin() + static_cast<std::ptrdiff_t>(t.offset));
  }
  return out;
}

}  // namespace natlab
