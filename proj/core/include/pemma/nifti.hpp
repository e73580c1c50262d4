// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal single-file NIfTI-1 support: 348-byte header, magic "n+1",
// float32 (code 16) and int16 (code 4) payloads, 3-D images only.
// Both byte orders are read (detected via sizeof_hdr); files are always
// written little-endian. Compressed inputs are rejected.

#include <filesystem>

#include "pemma/volume.hpp"

namespace pemma {

enum class NiftiDtype { float32, int16 };

Volume read_nifti(const std::filesystem::path& path);
void write_nifti(const std::filesystem::path& path, const Volume& v,
                 NiftiDtype dtype = NiftiDtype::float32);

}  // namespace pemma
