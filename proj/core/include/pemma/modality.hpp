// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>

#include "pemma/errors.hpp"
#include "pemma/rng.hpp"

namespace pemma {

enum class Mode : int { ct = 0, pet = 1, ctpet = 2 };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::ct: return "ct";
    case Mode::pet: return "pet";
    default: return "ctpet";
  }
}

inline Mode parse_mode(const std::string& s) {
  if (s == "ct") return Mode::ct;
  if (s == "pet") return Mode::pet;
  if (s == "ctpet") return Mode::ctpet;
  throw ConfigError("unknown modality mode '" + s + "' (expected ct, pet or ctpet)");
}

// Per-step modality dropout for joint training: each step sees CT only, PET
// only, or both, with the configured probabilities.
struct ModalityDropout {
  double p_ct = 0.2;
  double p_pet = 0.2;
  double p_ctpet = 0.6;

  void validate() const {
    if (p_ct < 0 || p_pet < 0 || p_ctpet < 0)
      throw ConfigError("modality dropout: probabilities must be non-negative");
    if (std::fabs(p_ct + p_pet + p_ctpet - 1.0) > 1e-9)
      throw ConfigError("modality dropout: probabilities must sum to 1");
  }
};

inline Mode sample_modality_mode(Rng& rng, const ModalityDropout& d) {
  d.validate();
  const double u = rng.uniform();
  if (u < d.p_ct) return Mode::ct;
  if (u < d.p_ct + d.p_pet) return Mode::pet;
  return Mode::ctpet;
}

}  // namespace pemma
