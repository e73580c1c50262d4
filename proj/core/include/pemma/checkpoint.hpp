// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parameter container file. See docs/checkpoint_format.md for the exact
// byte layout; the format is versioned and all payloads are little-endian
// float32 regardless of host.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pemma/tensor.hpp"

namespace pemma {

enum class ParamGroup : uint8_t {
  base = 0,     // pretrained backbone weights
  pe_pet = 1,   // PET patch/positional embedding
  peft = 2,     // low-rank adapter pairs (+ magnitudes)
  sk_pet = 3,   // PET skip projection and its blend factor
  adapter = 4,  // single-modality channel expander
  head = 5,     // prognosis head
  aux = 6,      // anything else (second late-fusion model, ...)
};

const char* param_group_name(ParamGroup g);

struct CheckpointEntry {
  std::string name;
  ParamGroup group = ParamGroup::base;
  bool frozen = false;
  std::vector<int> shape;
  std::vector<float> data;

  long long numel() const {
    long long n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
  bool has_group(ParamGroup g) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a over the payload bytes of every entry in `group`, in entry order.
uint64_t checkpoint_group_hash(const Checkpoint& ckpt, ParamGroup group);

}  // namespace pemma
