// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "pemma/adaptation.hpp"
#include "pemma/backbone.hpp"
#include "pemma/errors.hpp"
#include "pemma/rng.hpp"
#include "pemma/tensor.hpp"

namespace pemma {

// Convex blend of two per-voxel probability fields of identical shape. At the
// endpoints the untouched input comes back exactly; in between row sums are
// preserved (w + (1-w) = 1).
template <typename T>
Tensor<T> late_fusion_combine(const Tensor<T>& m_ct, const Tensor<T>& m_pet, double w_ct) {
  if (m_ct.shape != m_pet.shape) throw ConfigError("late_fusion: mask shapes differ");
  if (!(w_ct >= 0.0 && w_ct <= 1.0))
    throw ConfigError("late_fusion: weight must lie in [0, 1], got " + std::to_string(w_ct));
  const T w = static_cast<T>(w_ct);
  const T u = static_cast<T>(1.0 - w_ct);
  Tensor<T> out = m_ct;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = w * m_ct.data[i] + u * m_pet.data[i];
  return out;
}

// Combined ledger for the two-member late-fusion ensemble: every row of each
// member, prefixed by its modality. Total is exactly twice one member.
inline ParamLedger late_fusion_ledger(const ModelGeometry& geo) {
  ParamLedger out;
  for (const char* prefix : {"ct.", "pet."}) {
    VariantSpec v;
    v.kind = (prefix[0] == 'c') ? ModelKind::uni_ct : ModelKind::uni_pet;
    ParamLedger member = ledger_for_geometry(geo, v);
    for (LedgerRow row : member.rows) {
      row.name = prefix + row.name;
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

// Two-channel variant of a pre-trained single-channel model: the embedding
// and skip weights gain a second input-channel slice. The first slice reuses
// the base weights; the second starts per `strategy`. Every parameter stays
// trainable -- this baseline retrains the whole network.
template <typename T>
SegmentationModel<T> build_early_fusion_from_base(const SegmentationModel<T>& base,
                                                  PetInit strategy, uint64_t seed) {
  if (base.kind != ModelKind::uni_ct)
    throw ConfigError("early_fusion: base model must be the single-channel CT backbone");
  if (base.multimodal())
    throw ConfigError("early_fusion: base model already carries a PET pathway");

  SegmentationModel<T> m;
  m.geo = base.geo;
  m.kind = ModelKind::early_fusion;
  m.blocks = base.blocks;
  m.dec = base.dec;
  m.adapt_cfg.method = AdaptMethod::none;
  m.route = base.route;

  Rng rng(seed);
  const int p3 = base.geo.patch_volume();
  const int dim = base.geo.dim;
  auto second = [&](T base_value) -> T {
    switch (strategy) {
      case PetInit::zero: return T(0);
      case PetInit::cross_modal: return base_value;
      case PetInit::random: return static_cast<T>(rng.gaussian(0.0, 0.02));
    }
    throw ConfigError("early_fusion: unknown init strategy");
  };

  m.embed_ct.c_in = 2;
  m.embed_ct.weight = Tensor<T>({dim, 2 * p3});
  for (int r = 0; r < dim; ++r)
    for (int c = 0; c < p3; ++c) {
      const T v = base.embed_ct.weight.at(r, c);
      m.embed_ct.weight.at(r, c) = v;
      m.embed_ct.weight.at(r, p3 + c) = second(v);
    }
  m.embed_ct.bias = base.embed_ct.bias;
  m.embed_ct.pos = base.embed_ct.pos;

  m.skip_ct.c_in = 2;
  m.skip_ct.weight = Tensor<T>({base.geo.decoder_channels, 2});
  for (int r = 0; r < base.geo.decoder_channels; ++r) {
    const T v = base.skip_ct.weight.at(r, 0);
    m.skip_ct.weight.at(r, 0) = v;
    m.skip_ct.weight.at(r, 1) = second(v);
  }
  m.skip_ct.bias = base.skip_ct.bias;

  for (auto& np : named_params(m)) np.tensor->requires_grad = true;
  return m;
}

}  // namespace pemma
