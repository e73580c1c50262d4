// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pemma/phantom.hpp"

namespace pemma {

enum class Split : int { pretrain = 0, adapt = 1, continual = 2 };

const char* split_name(Split s);
Split parse_split(const std::string& s);

struct CenterSpec {
  std::string name;
  Split split = Split::pretrain;
  int cases = 0;
  uint64_t seed_base = 0;
  int holdout = 0;  // trailing cases reserved for evaluation
  PhantomSpec phantom;

  int train_count() const { return cases - holdout; }
};

struct CenterManifest {
  int version = 1;
  std::vector<CenterSpec> centers;

  const CenterSpec* find(const std::string& name) const;
  std::vector<const CenterSpec*> by_split(Split s) const;
  void validate() const;
};

// Text format: `version = 1` followed by `[center NAME]` sections holding
// key = value lines (split/cases/seed_base/holdout plus phantom overrides).
// `#` starts a comment. See docs/manifest_format.md.
CenterManifest parse_manifest_text(const std::string& text);
CenterManifest parse_manifest(const std::filesystem::path& path);

// All cases of a center, ids "<name>-NNNN", seeds seed_base + index.
std::vector<CaseSample> generate_center_cases(const CenterSpec& center);
// Leading train_count() cases / trailing holdout cases.
std::vector<CaseSample> generate_train_cases(const CenterSpec& center);
std::vector<CaseSample> generate_eval_cases(const CenterSpec& center);

}  // namespace pemma
