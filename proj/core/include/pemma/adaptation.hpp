// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pemma/autodiff.hpp"
#include "pemma/backbone.hpp"
#include "pemma/errors.hpp"
#include "pemma/rng.hpp"
#include "pemma/tensor.hpp"

namespace pemma {

// ---------------------------------------------------------------------------
// Column norms
// ---------------------------------------------------------------------------

// Euclidean norm of each column of a (rows x cols) matrix. Accumulates in T in
// increasing row order so the result matches the on-tape computation
// (square -> column sum -> sqrt) bit for bit; magnitude initialisation and the
// forward pass must agree exactly for the zero-delta identity to hold.
template <typename T>
Tensor<T> column_norms(const Tensor<T>& w) {
  if (w.ndim() != 2) throw ConfigError("column_norms: expected a matrix");
  const int m = w.rows(), n = w.cols();
  Tensor<T> out({n});
  for (int j = 0; j < n; ++j) {
    T acc = T(0);
    for (int i = 0; i < m; ++i) {
      const T v = w.data[static_cast<size_t>(i) * n + j];
      acc += v * v;
    }
    out.data[j] = std::sqrt(acc);
  }
  return out;
}

// On-tape counterpart: (1 x cols) row of column norms.
template <typename T>
Id column_norms_node(Tape<T>& tape, Id w) {
  return tape.sqrt(tape.sum_cols(tape.mul(w, w)));
}

// ---------------------------------------------------------------------------
// Adapted linear layers
// ---------------------------------------------------------------------------

// Registers each parameter tensor as a tape leaf at most once per tape, so a
// forward pass that touches a weight repeatedly still accumulates one gradient.
template <typename T>
struct TapeBinder {
  Tape<T>& tape;
  std::unordered_map<const Tensor<T>*, Id> bound;

  explicit TapeBinder(Tape<T>& t) : tape(t) {}
  Id operator()(Tensor<T>& t) {
    auto it = bound.find(&t);
    if (it != bound.end()) return it->second;
    Id id = tape.leaf(t);
    bound.emplace(&t, id);
    return id;
  }
};

// Plain projection: x (n x d_in) -> x W^T (n x d_out).
template <typename T>
Id base_linear(Tape<T>& tape, Id x, Id w) {
  return tape.matmul(x, tape.transpose(w));
}

// Low-rank update without materialising the combined weight:
//   out = x W^T + s * (x A^T) B^T
// A is (rank x d_in), B is (d_out x rank); with B zero the update contributes
// exact zeros and the output equals the frozen projection.
template <typename T>
Id lora_linear(Tape<T>& tape, Id x, Id w, Id a, Id b, T scale) {
  Id frozen = tape.matmul(x, tape.transpose(w));
  Id low = tape.matmul(tape.matmul(x, tape.transpose(a)), tape.transpose(b));
  return tape.add(frozen, tape.scale(low, scale));
}

// Magnitude/direction form. `canonical` keeps a trainable magnitude row m and
// rescales each column of (W + s B A) to it:
//   W' = (W + s B A) * (m / ||W + s B A||_col)
// `paper_literal` normalises only the frozen weight and adds the raw update:
//   W' = W / ||W||_col + s B A
template <typename T>
Id dora_linear(Tape<T>& tape, Id x, Id w, Id a, Id b, Id m, T scale, DoraForm form) {
  Id delta = tape.scale(tape.matmul(b, a), scale);
  const int rows = tape.val(w).rows();
  auto check_norms = [&](Id norms) {
    for (T v : tape.val(norms).data)
      if (!(v > T(0))) throw NumericError("dora: zero column norm; direction is undefined");
  };
  if (form == DoraForm::canonical) {
    if (tape.val(m).numel() != tape.val(w).cols())
      throw ConfigError("dora: magnitude row must have one entry per weight column");
    Id combined = tape.add(w, delta);
    Id norms = column_norms_node(tape, combined);  // (1 x d_in)
    check_norms(norms);
    Id ratio = tape.div(tape.reshape(m, {1, tape.val(w).cols()}), norms);
    Id wprime = tape.mul(combined, tape.broadcast_rows(ratio, rows));
    return tape.matmul(x, tape.transpose(wprime));
  }
  Id norms = column_norms_node(tape, w);
  check_norms(norms);
  Id unit = tape.div(w, tape.broadcast_rows(norms, rows));
  Id wprime = tape.add(unit, delta);
  return tape.matmul(x, tape.transpose(wprime));
}

// Dispatch used by the encoder: applies whichever update is attached.
template <typename T>
Id adapted_linear(Tape<T>& tape, TapeBinder<T>& bind, Id x, Id w, const AdaptationConfig& cfg,
                  std::optional<AttnAdapter<T>>& slot) {
  if (!slot || cfg.method == AdaptMethod::none) return base_linear(tape, x, w);
  Id a = bind(slot->pair.a);
  Id b = bind(slot->pair.b);
  const T s = static_cast<T>(cfg.scale());
  if (cfg.method == AdaptMethod::lora) return lora_linear(tape, x, w, a, b, s);
  Id m = (cfg.dora_form == DoraForm::canonical) ? bind(slot->m) : Id{-1};
  return dora_linear(tape, x, w, a, b, m, s, cfg.dora_form);
}

// ---------------------------------------------------------------------------
// Skip blend and channel expander
// ---------------------------------------------------------------------------

// z = z_ct + beta * z_pet, with a scalar (1-element) blend factor. With beta
// zero the PET branch contributes exact zeros.
template <typename T>
Id skip_combine(Tape<T>& tape, Id z_ct, Id z_pet, Id beta) {
  if (tape.val(z_pet).shape != tape.val(z_ct).shape)
    throw ConfigError("skip_combine: branch shapes differ");
  if (tape.val(beta).numel() != 1) throw ConfigError("skip_combine: blend factor must be scalar");
  // Copy the extents up front: growing the tape invalidates val() references.
  const int rows = tape.val(z_ct).rows();
  const int cols = tape.val(z_ct).cols();
  Id row = tape.broadcast_cols(tape.reshape(beta, {1, 1}), cols);
  Id full = tape.broadcast_rows(row, rows);
  return tape.add(z_ct, tape.mul(z_pet, full));
}

// (V x 1) voxel column -> (V x 2) channel pair through the 1->2 expander.
template <typename T>
Id adapter_expand(Tape<T>& tape, TapeBinder<T>& bind, AdapterLayer<T>& layer, Id x) {
  if (tape.val(x).cols() != 1) throw ConfigError("adapter: expected a single-channel column");
  Id w = bind(layer.weight);
  Id b = bind(layer.bias);
  return tape.add_rowvec(tape.matmul(x, tape.transpose(w)), tape.reshape(b, {1, 2}));
}

// ---------------------------------------------------------------------------
// Multimodal upgrade
// ---------------------------------------------------------------------------

enum class PetInit : int { zero = 0, random = 1, cross_modal = 2 };

inline PetInit parse_pet_init(const std::string& s) {
  if (s == "zero") return PetInit::zero;
  if (s == "random") return PetInit::random;
  if (s == "cross_modal") return PetInit::cross_modal;
  throw ConfigError("unknown PET embedding init '" + s + "'");
}

template <typename T>
PatchEmbedding<T> init_pet_embedding(const ModelGeometry& geo, PetInit strategy,
                                     const PatchEmbedding<T>& ct_embed, Rng& rng) {
  PatchEmbedding<T> e;
  e.c_in = 1;
  const int cols = geo.patch_volume();
  switch (strategy) {
    case PetInit::zero:
      e.weight = Tensor<T>({geo.dim, cols});
      e.bias = Tensor<T>({geo.dim});
      e.pos = Tensor<T>({geo.tokens_per_modality(), geo.dim});
      break;
    case PetInit::random:
      e.weight = detail::gauss_init<T>({geo.dim, cols}, rng);
      e.bias = Tensor<T>({geo.dim});
      e.pos = detail::gauss_init<T>({geo.tokens_per_modality(), geo.dim}, rng);
      break;
    case PetInit::cross_modal: {
      if (ct_embed.c_in != 1)
        throw ConfigError("cross-modal init needs a single-channel source embedding");
      e.weight = ct_embed.weight;
      e.bias = ct_embed.bias;
      e.pos = ct_embed.pos;
      e.weight.requires_grad = e.bias.requires_grad = e.pos.requires_grad = false;
      break;
    }
  }
  return e;
}

// Attaches the PET pathway to a single-modality model: PET patch embedding,
// PET voxel skip with a zero blend factor, and the 1->2 channel expander
// initialised to pass the lone input through channel 0.
template <typename T>
void upgrade_to_multimodal(SegmentationModel<T>& model, PetInit strategy, uint64_t seed) {
  if (model.kind != ModelKind::uni_ct)
    throw ConfigError("multimodal upgrade: base model must be the single-modality backbone");
  if (model.multimodal()) throw ConfigError("multimodal upgrade: model already upgraded");
  Rng rng(seed);
  model.embed_pet = init_pet_embedding(model.geo, strategy, model.embed_ct, rng);
  model.skip_pet = build_skip_path<T>(model.geo, 1, rng);
  model.beta = Tensor<T>({1});
  AdapterLayer<T> ad;
  ad.weight = Tensor<T>({2, 1});
  ad.weight.data[0] = T(1);  // channel 0 <- input, channel 1 <- 0
  ad.bias = Tensor<T>({2});
  model.adapter = std::move(ad);
  model.embed_pet->weight.requires_grad = true;
  model.embed_pet->bias.requires_grad = true;
  model.embed_pet->pos.requires_grad = true;
  model.skip_pet->weight.requires_grad = true;
  model.skip_pet->bias.requires_grad = true;
  model.beta->requires_grad = true;
  model.adapter->weight.requires_grad = true;
  model.adapter->bias.requires_grad = true;
}

// Injects low-rank adapters into the selected attention projections of every
// block and freezes the pretrained weights. A is gaussian, B starts at zero,
// and for the canonical magnitude form m starts at the column norms of the
// frozen weight so the injected model reproduces the frozen outputs exactly.
template <typename T>
void inject_adapters(SegmentationModel<T>& model, const AdaptationConfig& cfg, uint64_t seed) {
  if (cfg.method == AdaptMethod::none)
    throw ConfigError("inject_adapters: no adaptation method selected");
  cfg.validate();
  if (model.adapted()) throw ConfigError("inject_adapters: adapters already injected");
  Rng rng(seed);
  model.adapt_cfg = cfg;
  model.adapters.resize(model.blocks.size());
  for (size_t i = 0; i < model.blocks.size(); ++i) {
    auto& blk = model.blocks[i];
    for (AttnTarget t : cfg.targets) {
      Tensor<T>* w = nullptr;
      switch (t) {
        case AttnTarget::q: w = &blk.wq; break;
        case AttnTarget::k: w = &blk.wk; break;
        case AttnTarget::v: w = &blk.wv; break;
        case AttnTarget::o: w = &blk.wo; break;
      }
      AttnAdapter<T> ad;
      ad.pair.a = detail::gauss_init<T>({cfg.rank, model.geo.dim}, rng);
      ad.pair.b = Tensor<T>({model.geo.dim, cfg.rank});
      ad.pair.a.requires_grad = true;
      ad.pair.b.requires_grad = true;
      if (cfg.method == AdaptMethod::dora && cfg.dora_form == DoraForm::canonical) {
        ad.m = column_norms(*w);
        ad.m.requires_grad = true;
      }
      model.adapters[i].slot(t) = std::move(ad);
    }
  }
  // Freeze the pretrained backbone; everything added on top stays trainable.
  for (auto& p : named_params(model))
    if (p.group == ParamGroup::base) p.tensor->requires_grad = false;
}

// ---------------------------------------------------------------------------
// Parameter ledger
// ---------------------------------------------------------------------------

struct LedgerRow {
  std::string name;
  std::vector<int> shape;
  ParamGroup group = ParamGroup::base;
  bool trainable = false;

  long long count() const {
    long long n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

struct ParamLedger {
  std::vector<LedgerRow> rows;

  long long total() const {
    long long n = 0;
    for (const auto& r : rows) n += r.count();
    return n;
  }
  long long trainable() const {
    long long n = 0;
    for (const auto& r : rows)
      if (r.trainable) n += r.count();
    return n;
  }
  long long group_total(ParamGroup g) const {
    long long n = 0;
    for (const auto& r : rows)
      if (r.group == g) n += r.count();
    return n;
  }
  double trainable_fraction() const {
    const long long t = total();
    return t == 0 ? 0.0 : static_cast<double>(trainable()) / static_cast<double>(t);
  }
};

template <typename T>
ParamLedger ledger_of(SegmentationModel<T>& model) {
  ParamLedger ledger;
  for (auto& p : named_params(model))
    ledger.rows.push_back({p.name, p.tensor->shape, p.group, p.tensor->requires_grad});
  return ledger;
}

// Describes a model variant for size arithmetic without building it.
struct VariantSpec {
  ModelKind kind = ModelKind::uni_ct;
  bool multimodal = false;
  AdaptationConfig adapt{AdaptMethod::none, 0, 0.0, {}, DoraForm::canonical};
  bool base_frozen = false;   // adapters injected => backbone frozen
  bool with_prognosis = false;
  int prognosis_hidden = 32;
  int prognosis_bins = 20;
  int prognosis_in = 0;  // 0 => dim + default record feature width
};

// Closed-form row list for a geometry/variant pair. Produces exactly the rows
// an instantiated model would report, so sizes for large configurations can be
// computed without allocating them; unit tests pin this against a real model
// at small scale.
ParamLedger ledger_for_geometry(const ModelGeometry& geo, const VariantSpec& variant);

std::string param_report(const ParamLedger& ledger);

}  // namespace pemma
