// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pemma {

// Axis-aligned scalar volume, identity orientation. Voxels are stored
// z-major: index = (z * ny + y) * nx + x.
struct Volume {
  int nx = 0, ny = 0, nz = 0;
  std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f};
  std::string modality;  // "ct", "pet", or empty
  std::vector<float> data;

  Volume() = default;
  Volume(int x, int y, int z, float fill = 0.0f)
      : nx(x), ny(y), nz(z), data(static_cast<size_t>(x) * y * z, fill) {}

  size_t numel() const { return static_cast<size_t>(nx) * ny * nz; }
  bool cubic() const { return nx == ny && ny == nz; }

  float& at(int x, int y, int z) {
    return data[(static_cast<size_t>(z) * ny + y) * nx + x];
  }
  float at(int x, int y, int z) const {
    return data[(static_cast<size_t>(z) * ny + y) * nx + x];
  }
};

// Label mask with the same layout (0 background, 1 tumor, 2 node).
struct LabelVolume {
  int nx = 0, ny = 0, nz = 0;
  std::vector<uint8_t> data;

  LabelVolume() = default;
  LabelVolume(int x, int y, int z)
      : nx(x), ny(y), nz(z), data(static_cast<size_t>(x) * y * z, 0) {}

  size_t numel() const { return data.size(); }
  uint8_t& at(int x, int y, int z) {
    return data[(static_cast<size_t>(z) * ny + y) * nx + x];
  }
  uint8_t at(int x, int y, int z) const {
    return data[(static_cast<size_t>(z) * ny + y) * nx + x];
  }
};

// Internal raw volume container: 12-byte magic, u32 version, u32 dims[3],
// f32 spacing[3], u32 dtype code (1 = float32), little-endian payload.
void write_raw_volume(const std::filesystem::path& path, const Volume& v);
Volume read_raw_volume(const std::filesystem::path& path);

// Geometric augmentations; each returns a new volume with the same spacing.
// `axis` is 0=x, 1=y, 2=z; rotations are quarter turns about z.
Volume flip_volume(const Volume& v, int axis);
LabelVolume flip_labels(const LabelVolume& v, int axis);
Volume rotate90_z(const Volume& v, int quarter_turns);
LabelVolume rotate90_z_labels(const LabelVolume& v, int quarter_turns);

// Axis-aligned crop of extent `size` starting at (x0, y0, z0); bounds-checked.
Volume crop_volume(const Volume& v, int x0, int y0, int z0, int size);
LabelVolume crop_labels(const LabelVolume& v, int x0, int y0, int z0, int size);

}  // namespace pemma
