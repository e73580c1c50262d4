// SPDX-License-Identifier: Apache-2.0
#include "pemma/nifti.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "pemma/errors.hpp"

namespace pemma {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;  // header + 4-byte extension indicator

uint16_t bswap16(uint16_t v) { return static_cast<uint16_t>((v << 8) | (v >> 8)); }
uint32_t bswap32(uint32_t v) {
  return (v << 24) | ((v << 8) & 0x00ff0000u) | ((v >> 8) & 0x0000ff00u) | (v >> 24);
}

struct Reader {
  const unsigned char* p;
  bool swap;

  int16_t i16(int off) const {
    uint16_t v;
    std::memcpy(&v, p + off, 2);
    if (swap) v = bswap16(v);
    return static_cast<int16_t>(v);
  }
  int32_t i32(int off) const {
    uint32_t v;
    std::memcpy(&v, p + off, 4);
    if (swap) v = bswap32(v);
    return static_cast<int32_t>(v);
  }
  float f32(int off) const {
    uint32_t v;
    std::memcpy(&v, p + off, 4);
    if (swap) v = bswap32(v);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
};

void store_i16(unsigned char* p, int off, int16_t v) {
  const uint16_t u = static_cast<uint16_t>(v);
  p[off] = static_cast<unsigned char>(u & 0xff);
  p[off + 1] = static_cast<unsigned char>(u >> 8);
}
void store_i32(unsigned char* p, int off, int32_t v) {
  const uint32_t u = static_cast<uint32_t>(v);
  for (int i = 0; i < 4; ++i) p[off + i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
}
void store_f32(unsigned char* p, int off, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  for (int i = 0; i < 4; ++i) p[off + i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
}

}  // namespace

Volume read_nifti(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("nifti: cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  if (bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0x1f &&
      static_cast<unsigned char>(bytes[1]) == 0x8b)
    throw DataError("nifti: compressed files are not supported, decompress first: " +
                    path.string());
  if (bytes.size() < kHeaderSize) throw DataError("nifti: truncated header: " + path.string());

  const unsigned char* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  int32_t sizeof_hdr_native;
  std::memcpy(&sizeof_hdr_native, raw, 4);
  bool swap;
  if (sizeof_hdr_native == kHeaderSize) {
    swap = false;
  } else if (static_cast<int32_t>(bswap32(static_cast<uint32_t>(sizeof_hdr_native))) ==
             kHeaderSize) {
    swap = true;
  } else {
    throw DataError("nifti: not a NIfTI-1 file (sizeof_hdr mismatch): " + path.string());
  }
  Reader r{raw, swap};

  if (std::memcmp(raw + 344, "n+1\0", 4) != 0) {
    if (std::memcmp(raw + 344, "ni1\0", 4) == 0)
      throw DataError("nifti: two-file (.hdr/.img) images are not supported: " + path.string());
    throw DataError("nifti: bad magic: " + path.string());
  }

  const int16_t ndim = r.i16(40);
  if (ndim != 3)
    throw DataError("nifti: expected a 3-D image, got dim[0]=" + std::to_string(ndim) + ": " +
                    path.string());
  const int nx = r.i16(42), ny = r.i16(44), nz = r.i16(46);
  if (nx <= 0 || ny <= 0 || nz <= 0)
    throw DataError("nifti: non-positive dimensions: " + path.string());

  const int16_t datatype = r.i16(70);
  const int16_t bitpix = r.i16(72);
  int elem_size;
  if (datatype == 16) {
    elem_size = 4;
    if (bitpix != 32) throw DataError("nifti: bitpix/datatype mismatch: " + path.string());
  } else if (datatype == 4) {
    elem_size = 2;
    if (bitpix != 16) throw DataError("nifti: bitpix/datatype mismatch: " + path.string());
  } else {
    throw DataError("nifti: unsupported datatype code " + std::to_string(datatype) + ": " +
                    path.string());
  }

  Volume v(nx, ny, nz);
  for (int a = 0; a < 3; ++a) {
    float s = r.f32(76 + 4 * (a + 1));
    if (!(s > 0.0f) || !std::isfinite(s))
      throw DataError("nifti: non-positive voxel spacing: " + path.string());
    v.spacing[a] = s;
  }

  const float vox_offset_f = r.f32(108);
  if (!(vox_offset_f >= kHeaderSize) || vox_offset_f != std::floor(vox_offset_f))
    throw DataError("nifti: bad vox_offset: " + path.string());
  const size_t vox_offset = static_cast<size_t>(vox_offset_f);

  const size_t need = vox_offset + v.numel() * elem_size;
  if (bytes.size() < need) throw DataError("nifti: truncated payload: " + path.string());

  const unsigned char* src = raw + vox_offset;
  if (datatype == 16) {
    for (size_t i = 0; i < v.numel(); ++i) {
      uint32_t u;
      std::memcpy(&u, src + 4 * i, 4);
      if (swap) u = bswap32(u);
      std::memcpy(&v.data[i], &u, 4);
    }
  } else {
    for (size_t i = 0; i < v.numel(); ++i) {
      uint16_t u;
      std::memcpy(&u, src + 2 * i, 2);
      if (swap) u = bswap16(u);
      v.data[i] = static_cast<float>(static_cast<int16_t>(u));
    }
  }
  return v;
}

void write_nifti(const std::filesystem::path& path, const Volume& v, NiftiDtype dtype) {
  if (v.nx <= 0 || v.ny <= 0 || v.nz <= 0 || v.data.size() != v.numel())
    throw ConfigError("nifti: inconsistent volume dimensions");

  unsigned char hdr[kVoxOffset] = {0};
  store_i32(hdr, 0, kHeaderSize);
  store_i16(hdr, 40, 3);
  store_i16(hdr, 42, static_cast<int16_t>(v.nx));
  store_i16(hdr, 44, static_cast<int16_t>(v.ny));
  store_i16(hdr, 46, static_cast<int16_t>(v.nz));
  for (int a = 4; a <= 7; ++a) store_i16(hdr, 40 + 2 * a, 1);
  if (dtype == NiftiDtype::float32) {
    store_i16(hdr, 70, 16);
    store_i16(hdr, 72, 32);
  } else {
    store_i16(hdr, 70, 4);
    store_i16(hdr, 72, 16);
  }
  store_f32(hdr, 76, 1.0f);
  for (int a = 0; a < 3; ++a) store_f32(hdr, 76 + 4 * (a + 1), v.spacing[a]);
  store_f32(hdr, 108, static_cast<float>(kVoxOffset));
  store_f32(hdr, 112, 1.0f);  // scl_slope
  std::memcpy(hdr + 344, "n+1\0", 4);
  // bytes 348..351 stay zero: no header extensions

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("nifti: cannot open for write: " + path.string());
  os.write(reinterpret_cast<const char*>(hdr), kVoxOffset);
  std::string payload;
  if (dtype == NiftiDtype::float32) {
    payload.reserve(4 * v.numel());
    for (float f : v.data) {
      uint32_t u;
      std::memcpy(&u, &f, 4);
      for (int i = 0; i < 4; ++i) payload.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
  } else {
    payload.reserve(2 * v.numel());
    for (float f : v.data) {
      float r = std::nearbyint(f);
      if (r < -32768.0f || r > 32767.0f)
        throw DataError("nifti: value out of int16 range on write");
      uint16_t u = static_cast<uint16_t>(static_cast<int16_t>(r));
      payload.push_back(static_cast<char>(u & 0xff));
      payload.push_back(static_cast<char>(u >> 8));
    }
  }
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw DataError("nifti: write failed: " + path.string());
}

}  // namespace pemma
