#pragma once

// Versioned binary container shared by checkpoints and spectrogram caches:
//
//   magic "RPRGCKPT" | u32 version | str config_text | u32 n_meta {str key, str value}
//   | u32 n_blocks {str name, u32 ndims, u64 dims[ndims], f32 data[prod(dims)], u64 CRC-64 of data}
//   | u64 CRC-64 of every preceding byte
//
// All integers and floats little-endian; strings are u32 length + bytes.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "reprog/bytes.hpp"
#include "reprog/error.hpp"
#include "reprog/tensor.hpp"

namespace reprog {

inline constexpr char kContainerMagic[8] = {'R', 'P', 'R', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct Block {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;
};

struct Container {
  std::string config_text;
  std::map<std::string, std::string> meta;
  std::vector<Block> blocks;

  const Block* find(const std::string& name) const {
    for (const auto& b : blocks) {
      if (b.name == name) return &b;
    }
    return nullptr;
  }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw Error(ErrorCode::kCheckpointCorrupt, "missing metadata '" + key + "'");
    return it->second;
  }
};

inline std::vector<unsigned char> encode(const Container& c) {
  ByteWriter w;
  for (char ch : kContainerMagic) w.put(ch);
  w.put(kContainerVersion);
  w.put_string(c.config_text);
  w.put(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    w.put_string(k);
    w.put_string(v);
  }
  w.put(static_cast<std::uint32_t>(c.blocks.size()));
  for (const auto& b : c.blocks) {
    std::uint64_t count = 1;
    for (auto d : b.shape) count *= d;
    if (count != b.data.size()) throw Error(ErrorCode::kShapeMismatch, "block '" + b.name + "' shape/data mismatch");
    w.put_string(b.name);
    w.put(static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) w.put(d);
    const std::size_t start = w.bytes().size();
    w.put_f32(b.data);
    Crc64 block_crc;
    block_crc.process_bytes(w.bytes().data() + start, w.bytes().size() - start);
    w.put(static_cast<std::uint64_t>(block_crc.checksum()));
  }
  Crc64 crc;
  crc.process_bytes(w.bytes().data(), w.bytes().size());
  w.put(static_cast<std::uint64_t>(crc.checksum()));
  return std::move(w.bytes());
}

inline Container decode(std::span<const unsigned char> bytes) {
  auto corrupt = [](const std::string& why) { return Error(ErrorCode::kCheckpointCorrupt, why); };
  if (bytes.size() < sizeof(kContainerMagic) + 4 + 8) throw corrupt("file too short");
  Crc64 crc;
  crc.process_bytes(bytes.data(), bytes.size() - 8);
  ByteReader tail(bytes.subspan(bytes.size() - 8));
  if (tail.get<std::uint64_t>() != crc.checksum()) throw corrupt("checksum mismatch");
  ByteReader r(bytes.first(bytes.size() - 8));
  for (char ch : kContainerMagic) {
    if (r.get<char>() != ch) throw corrupt("bad magic");
  }
  if (r.get<std::uint32_t>() != kContainerVersion) throw corrupt("unsupported version");
  Container c;
  c.config_text = r.get_string();
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta && r.ok(); ++i) {
    auto k = r.get_string();
    c.meta[k] = r.get_string();
  }
  const auto n_blocks = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_blocks && r.ok(); ++i) {
    Block b;
    b.name = r.get_string();
    const auto nd = r.get<std::uint32_t>();
    if (nd > 8) throw corrupt("implausible block rank");
    std::uint64_t count = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      b.shape.push_back(r.get<std::uint64_t>());
      count *= b.shape.back();
    }
    if (!r.ok() || count * 4 + 8 > r.remaining()) throw corrupt("truncated block '" + b.name + "'");
    Crc64 block_crc;
    block_crc.process_bytes(bytes.data() + r.position(), count * 4);
    b.data.resize(count);
    for (auto& v : b.data) v = r.get<float>();
    if (r.get<std::uint64_t>() != block_crc.checksum()) throw corrupt("content checksum mismatch in block '" + b.name + "'");
    c.blocks.push_back(std::move(b));
  }
  if (!r.ok() || r.remaining() != 0) throw corrupt("malformed container body");
  return c;
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

/// Single-matrix file (spectrogram caches, generated datasets).
inline void write_matrix(const std::filesystem::path& path, const Matrix<float>& m, const std::string& tag) {
  Container c;
  c.config_text = tag;
  c.blocks.push_back({"matrix", {m.rows(), m.cols()}, m.values()});
  write_container(path, c);
}

inline Matrix<float> read_matrix(const std::filesystem::path& path) {
  const auto c = read_container(path);
  const Block* b = c.find("matrix");
  if (b == nullptr || b->shape.size() != 2) throw Error(ErrorCode::kCheckpointCorrupt, "no matrix block in '" + path.string() + "'");
  return Matrix<float>(b->shape[0], b->shape[1], b->data);
}

}  // namespace reprog
