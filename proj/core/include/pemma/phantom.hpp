// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pemma/ehr.hpp"
#include "pemma/rng.hpp"
#include "pemma/volume.hpp"

namespace pemma {

// Synthetic case recipe. Lesions are PET-salient and CT-faint by construction:
// CT contrast is comparable to CT noise while PET hot spots sit far above the
// PET background, so the PET channel carries most of the class signal.
struct PhantomSpec {
  int side = 32;
  float spacing_mm = 1.0f;

  int tumor_count_min = 1, tumor_count_max = 2;
  int node_count_min = 1, node_count_max = 2;
  double tumor_radius_min = 3.0, tumor_radius_max = 5.0;
  double node_radius_min = 2.5, node_radius_max = 4.0;

  double ct_background = 40.0;      // soft-tissue plateau (HU-like)
  double ct_texture = 12.0;         // low-frequency anatomy amplitude
  double ct_noise = 10.0;           // voxel noise sigma
  double ct_tumor_contrast = 14.0;  // additive lesion contrast
  double ct_node_contrast = 10.0;

  double pet_background = 0.1;
  double pet_noise = 0.05;
  double pet_tumor_gain = 4.0;
  double pet_node_gain = 2.0;

  // Per-center domain-shift knobs.
  double intensity_offset = 0.0;   // added to CT everywhere
  double noise_scale = 1.0;        // multiplies both noise sigmas
  double lesion_size_bias = 0.0;   // relative radius inflation, e.g. 0.1

  double censor_fraction = 0.7;
  double survival_scale = 36.0;    // months-like time scale
  double survival_noise = 0.3;     // log-time noise sigma
  double risk_burden = 120.0;      // risk per unit foreground fraction
  double risk_hpv = 1.0;           // extra risk when HPV negative
  double ehr_missing_rate = 0.1;

  int max_lesion_attempts = 50;

  void validate() const;
};

struct SurvivalRecord {
  double time = 0.0;
  bool event = false;  // false = censored at `time`
};

struct CaseSample {
  std::string id;
  std::string center;
  uint64_t seed = 0;
  Volume ct;
  Volume pet;
  LabelVolume mask;  // 0 background, 1 tumor, 2 node
  EhrRecord ehr;
  SurvivalRecord survival;
  bool preprocessed = false;
  bool pet_all_zero = false;
};

// Deterministic under (seed, spec, center).
CaseSample generate_phantom(uint64_t seed, const PhantomSpec& spec, const std::string& center);

// CT: clip to [-200, 250] then map linearly to [0, 1]. PET: standardize to
// zero mean / unit variance over nonzero voxels (zeros stay zero; an all-zero
// PET is flagged and left untouched). Guarded by `preprocessed`: a second
// call is a no-op.
void preprocess_intensities(CaseSample& c);

struct PatchSample {
  int x0 = 0, y0 = 0, z0 = 0;
  Volume ct;
  Volume pet;
  LabelVolume mask;
  bool foreground = false;
};

// Draws `count` patches with foreground-containing vs background-only counts
// split as pos:neg (2:1 by default at call sites). Deterministic under rng.
std::vector<PatchSample> sample_patches(const CaseSample& c, int size, int pos, int neg,
                                        int count, Rng& rng);

// Random flips and a quarter-turn about z, applied consistently to CT, PET
// and mask.
void augment_case(CaseSample& c, Rng& rng);

long long foreground_voxels(const LabelVolume& mask);

}  // namespace pemma
