// SPDX-License-Identifier: Apache-2.0
#include "pemma/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "pemma/errors.hpp"

namespace pemma {

namespace {

constexpr char kMagic[8] = {'P', 'M', 'C', 'K', 'P', 'T', '\0', '\0'};
constexpr uint32_t kVersion = 1;

void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(reinterpret_cast<const char*>(p), n);
}

void put_u16(std::string& out, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8)};
  put_bytes(out, b, 2);
}

void put_u32(std::string& out, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(out, b, 4);
}

void put_u64(std::string& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(out, b, 8);
}

struct Cursor {
  const unsigned char* p;
  size_t n;
  size_t at = 0;

  void need(size_t k) const {
    if (at + k > n) throw DataError("checkpoint: truncated file");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(p[at] | (p[at + 1] << 8));
    at += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[at + i]) << (8 * i);
    at += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[at + i]) << (8 * i);
    at += 8;
    return v;
  }
  uint8_t u8() {
    need(1);
    return p[at++];
  }
};

float f32_from_le(const unsigned char* b) {
  uint32_t u = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

void f32_to_le(float f, std::string& out) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  out.append(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::base: return "base";
    case ParamGroup::pe_pet: return "pe_pet";
    case ParamGroup::peft: return "peft";
    case ParamGroup::sk_pet: return "sk_pet";
    case ParamGroup::adapter: return "adapter";
    case ParamGroup::head: return "head";
    case ParamGroup::aux: return "aux";
  }
  return "?";
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

bool Checkpoint::has_group(ParamGroup g) const {
  for (const auto& e : entries)
    if (e.group == g) return true;
  return false;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  // Table first (with payload offsets), then the payload region.
  std::string table;
  put_bytes(table, kMagic, 8);
  put_u32(table, kVersion);
  put_u32(table, 0);
  put_u64(table, ckpt.entries.size());

  size_t table_size = table.size();
  for (const auto& e : ckpt.entries) {
    if (e.name.empty() || e.name.size() > 0xffff)
      throw ConfigError("checkpoint: bad entry name");
    if (e.shape.empty() || e.shape.size() > 255)
      throw ConfigError("checkpoint: bad entry shape for " + e.name);
    if (static_cast<long long>(e.data.size()) != e.numel())
      throw ConfigError("checkpoint: entry size mismatch for " + e.name);
    table_size += 2 + e.name.size() + 4 + 4 * e.shape.size() + 8;
  }

  uint64_t offset = table_size;
  for (const auto& e : ckpt.entries) {
    put_u16(table, static_cast<uint16_t>(e.name.size()));
    put_bytes(table, e.name.data(), e.name.size());
    table.push_back(static_cast<char>(e.group));
    table.push_back(e.frozen ? 1 : 0);
    table.push_back(static_cast<char>(e.shape.size()));
    table.push_back(0);
    for (int d : e.shape) put_u32(table, static_cast<uint32_t>(d));
    put_u64(table, offset);
    offset += 4 * e.data.size();
  }
  if (table.size() != table_size) throw Error("checkpoint: internal layout bug");

  std::string payload;
  payload.reserve(offset - table_size);
  for (const auto& e : ckpt.entries)
    for (float f : e.data) f32_to_le(f, payload);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open for write: " + path.string());
  out.write(table.data(), static_cast<std::streamsize>(table.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw DataError("checkpoint: write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Cursor c{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()};
  c.need(8);
  if (std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw DataError("checkpoint: bad magic: " + path.string());
  c.at = 8;
  uint32_t version = c.u32();
  if (version != kVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  c.u32();  // reserved
  uint64_t count = c.u64();
  if (count > (1u << 20)) throw DataError("checkpoint: implausible entry count");

  Checkpoint ckpt;
  ckpt.entries.reserve(count);
  struct Pending {
    uint64_t offset;
  };
  std::vector<Pending> pend(count);
  for (uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    uint16_t name_len = c.u16();
    c.need(name_len);
    e.name.assign(reinterpret_cast<const char*>(c.p + c.at), name_len);
    c.at += name_len;
    uint8_t group = c.u8();
    if (group > static_cast<uint8_t>(ParamGroup::aux))
      throw DataError("checkpoint: unknown group tag for " + e.name);
    e.group = static_cast<ParamGroup>(group);
    e.frozen = c.u8() != 0;
    uint8_t ndim = c.u8();
    c.u8();  // reserved
    if (ndim == 0) throw DataError("checkpoint: rank-0 entry " + e.name);
    e.shape.resize(ndim);
    for (uint8_t d = 0; d < ndim; ++d) {
      uint32_t extent = c.u32();
      if (extent == 0 || extent > (1u << 28))
        throw DataError("checkpoint: bad extent for " + e.name);
      e.shape[d] = static_cast<int>(extent);
    }
    pend[i].offset = c.u64();
    ckpt.entries.push_back(std::move(e));
  }
  for (uint64_t i = 0; i < count; ++i) {
    CheckpointEntry& e = ckpt.entries[i];
    const uint64_t need = pend[i].offset + 4ull * static_cast<uint64_t>(e.numel());
    if (pend[i].offset < c.at || need > bytes.size())
      throw DataError("checkpoint: truncated payload for " + e.name);
    e.data.resize(static_cast<size_t>(e.numel()));
    const unsigned char* src =
        reinterpret_cast<const unsigned char*>(bytes.data()) + pend[i].offset;
    for (size_t k = 0; k < e.data.size(); ++k) e.data[k] = f32_from_le(src + 4 * k);
  }
  return ckpt;
}

uint64_t checkpoint_group_hash(const Checkpoint& ckpt, ParamGroup group) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : ckpt.entries) {
    if (e.group != group) continue;
    const unsigned char* p = reinterpret_cast<const unsigned char*>(e.data.data());
    for (size_t i = 0; i < e.data.size() * 4; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace pemma
