// SPDX-License-Identifier: Apache-2.0
#include "pemma/volume.hpp"

#include <cstring>
#include <fstream>
#include <string>

#include "pemma/errors.hpp"

namespace pemma {

namespace {

constexpr char kMagic[12] = {'P', 'E', 'M', 'M', 'A', 'R', 'A', 'W', 'V', 'O', 'L', '\0'};
constexpr uint32_t kVersion = 1;
constexpr uint32_t kDtypeFloat32 = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

void put_f32(std::string& out, float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(out, u);
}

float get_f32(const unsigned char* p) {
  uint32_t u = get_u32(p);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace

void write_raw_volume(const std::filesystem::path& path, const Volume& v) {
  if (v.nx <= 0 || v.ny <= 0 || v.nz <= 0 || v.data.size() != v.numel())
    throw ConfigError("raw volume: inconsistent dimensions");
  std::string out;
  out.append(kMagic, 12);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(v.nx));
  put_u32(out, static_cast<uint32_t>(v.ny));
  put_u32(out, static_cast<uint32_t>(v.nz));
  put_f32(out, v.spacing[0]);
  put_f32(out, v.spacing[1]);
  put_f32(out, v.spacing[2]);
  put_u32(out, kDtypeFloat32);
  for (float f : v.data) put_f32(out, f);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("raw volume: cannot open for write: " + path.string());
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw DataError("raw volume: write failed: " + path.string());
}

Volume read_raw_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("raw volume: cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const size_t header = 12 + 4 + 3 * 4 + 3 * 4 + 4;
  if (bytes.size() < header) throw DataError("raw volume: truncated header: " + path.string());
  if (std::memcmp(bytes.data(), kMagic, 12) != 0)
    throw DataError("raw volume: bad magic: " + path.string());
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  uint32_t version = get_u32(p + 12);
  if (version != kVersion)
    throw DataError("raw volume: unsupported version " + std::to_string(version));
  Volume v;
  v.nx = static_cast<int>(get_u32(p + 16));
  v.ny = static_cast<int>(get_u32(p + 20));
  v.nz = static_cast<int>(get_u32(p + 24));
  if (v.nx <= 0 || v.ny <= 0 || v.nz <= 0 || v.numel() > (1ull << 31))
    throw DataError("raw volume: bad dimensions: " + path.string());
  v.spacing = {get_f32(p + 28), get_f32(p + 32), get_f32(p + 36)};
  uint32_t dtype = get_u32(p + 40);
  if (dtype != kDtypeFloat32)
    throw DataError("raw volume: unsupported dtype code " + std::to_string(dtype));
  if (bytes.size() < header + 4 * v.numel())
    throw DataError("raw volume: truncated payload: " + path.string());
  v.data.resize(v.numel());
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = get_f32(p + header + 4 * i);
  return v;
}

namespace {

template <typename V>
V flip_impl(const V& v, int axis) {
  if (axis < 0 || axis > 2) throw ConfigError("flip: axis must be 0, 1 or 2");
  V out = v;
  for (int z = 0; z < v.nz; ++z)
    for (int y = 0; y < v.ny; ++y)
      for (int x = 0; x < v.nx; ++x) {
        const int sx = axis == 0 ? v.nx - 1 - x : x;
        const int sy = axis == 1 ? v.ny - 1 - y : y;
        const int sz = axis == 2 ? v.nz - 1 - z : z;
        out.at(x, y, z) = v.at(sx, sy, sz);
      }
  return out;
}

// One quarter turn about z maps (x, y) -> (y, nx-1-x); sizes of x/y swap.
template <typename V>
V rot90_impl(const V& v, int quarter_turns) {
  int k = ((quarter_turns % 4) + 4) % 4;
  V cur = v;
  for (int t = 0; t < k; ++t) {
    V out = cur;
    out.nx = cur.ny;
    out.ny = cur.nx;
    for (int z = 0; z < cur.nz; ++z)
      for (int y = 0; y < out.ny; ++y)
        for (int x = 0; x < out.nx; ++x) out.at(x, y, z) = cur.at(y, cur.ny - 1 - x, z);
    cur = std::move(out);
  }
  return cur;
}

template <typename V>
V crop_impl(const V& v, int x0, int y0, int z0, int size) {
  if (size <= 0) throw ConfigError("crop: size must be positive");
  if (x0 < 0 || y0 < 0 || z0 < 0 || x0 + size > v.nx || y0 + size > v.ny || z0 + size > v.nz)
    throw ConfigError("crop: window out of bounds");
  V out = v;
  out.nx = out.ny = out.nz = size;
  out.data.assign(static_cast<size_t>(size) * size * size, {});
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at(x, y, z) = v.at(x0 + x, y0 + y, z0 + z);
  return out;
}

}  // namespace

Volume flip_volume(const Volume& v, int axis) { return flip_impl(v, axis); }
LabelVolume flip_labels(const LabelVolume& v, int axis) { return flip_impl(v, axis); }
Volume rotate90_z(const Volume& v, int quarter_turns) { return rot90_impl(v, quarter_turns); }
LabelVolume rotate90_z_labels(const LabelVolume& v, int quarter_turns) {
  return rot90_impl(v, quarter_turns);
}
Volume crop_volume(const Volume& v, int x0, int y0, int z0, int size) {
  return crop_impl(v, x0, y0, z0, size);
}
LabelVolume crop_labels(const LabelVolume& v, int x0, int y0, int z0, int size) {
  return crop_impl(v, x0, y0, z0, size);
}

}  // namespace pemma

