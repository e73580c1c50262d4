// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <tuple>
#include <vector>

#include "pemma/adaptation.hpp"
#include "pemma/autodiff.hpp"
#include "pemma/backbone.hpp"
#include "pemma/modality.hpp"
#include "pemma/volume.hpp"

namespace pemma {

// ---------------------------------------------------------------------------
// Layout maps (cached per geometry; all volumes use z-major voxel order)
// ---------------------------------------------------------------------------

using IndexMap = std::shared_ptr<const std::vector<size_t>>;

namespace detail {

// (side^3 x c) voxel matrix -> (tokens x patch^3*c) patch rows. Within a row
// the layout is channel-major: column = ch*patch^3 + local voxel offset.
inline IndexMap patchify_map(int side, int patch, int c) {
  static std::map<std::tuple<int, int, int>, IndexMap> cache;
  auto key = std::make_tuple(side, patch, c);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const int g = side / patch;
  const size_t pv = static_cast<size_t>(patch) * patch * patch;
  auto map = std::make_shared<std::vector<size_t>>();
  map->resize(static_cast<size_t>(g) * g * g * pv * c);
  size_t k = 0;
  for (int tz = 0; tz < g; ++tz)
    for (int ty = 0; ty < g; ++ty)
      for (int tx = 0; tx < g; ++tx)
        for (int ch = 0; ch < c; ++ch)
          for (int pz = 0; pz < patch; ++pz)
            for (int py = 0; py < patch; ++py)
              for (int px = 0; px < patch; ++px) {
                const size_t z = static_cast<size_t>(tz) * patch + pz;
                const size_t y = static_cast<size_t>(ty) * patch + py;
                const size_t x = static_cast<size_t>(tx) * patch + px;
                const size_t voxel = (z * side + y) * side + x;
                (*map)[k++] = voxel * c + ch;
              }
  IndexMap out = map;
  cache.emplace(key, out);
  return out;
}

// (tokens x 8c) tap projection -> ((2g)^3 x c) coarse grid. Tap row layout is
// sub-cell-major: column = ((sz*2+sy)*2+sx)*c + ch.
inline IndexMap depatch_map(int grid, int c) {
  static std::map<std::pair<int, int>, IndexMap> cache;
  auto key = std::make_pair(grid, c);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const int side = 2 * grid;
  auto map = std::make_shared<std::vector<size_t>>();
  map->resize(static_cast<size_t>(side) * side * side * c);
  size_t k = 0;
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const size_t token = (static_cast<size_t>(z / 2) * grid + y / 2) * grid + x / 2;
        const size_t sub = (static_cast<size_t>(z % 2) * 2 + y % 2) * 2 + x % 2;
        for (int ch = 0; ch < c; ++ch)
          (*map)[k++] = token * (8 * c) + sub * c + ch;
      }
  IndexMap out = map;
  cache.emplace(key, out);
  return out;
}

// Nearest-neighbour x2: (n^3 x c) -> ((2n)^3 x c).
inline IndexMap upsample_map(int n, int c) {
  static std::map<std::pair<int, int>, IndexMap> cache;
  auto key = std::make_pair(n, c);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const int m = 2 * n;
  auto map = std::make_shared<std::vector<size_t>>();
  map->resize(static_cast<size_t>(m) * m * m * c);
  size_t k = 0;
  for (int z = 0; z < m; ++z)
    for (int y = 0; y < m; ++y)
      for (int x = 0; x < m; ++x) {
        const size_t src = (static_cast<size_t>(z / 2) * n + y / 2) * n + x / 2;
        for (int ch = 0; ch < c; ++ch) (*map)[k++] = src * c + ch;
      }
  IndexMap out = map;
  cache.emplace(key, out);
  return out;
}

template <typename T>
Tensor<T> voxel_matrix(const ModelGeometry& geo, const Volume& vol) {
  if (vol.nx != geo.side || vol.ny != geo.side || vol.nz != geo.side)
    throw DataError("forward: volume extent " + std::to_string(vol.nx) + "x" +
                    std::to_string(vol.ny) + "x" + std::to_string(vol.nz) +
                    " does not match model side " + std::to_string(geo.side));
  Tensor<T> m({geo.voxels(), 1});
  for (int i = 0; i < geo.voxels(); ++i) m.data[i] = static_cast<T>(vol.data[i]);
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Embedding and encoder
// ---------------------------------------------------------------------------

// Tokenise a (voxels x c_in) matrix: patch rows -> linear projection -> bias
// -> learned positions. Returns (tokens x dim).
template <typename T>
Id embed_patches(Tape<T>& tape, TapeBinder<T>& bind, const ModelGeometry& geo,
                 PatchEmbedding<T>& embed, Id vox) {
  if (tape.val(vox).cols() != embed.c_in)
    throw ConfigError("embed_patches: channel count mismatch");
  Id rows = tape.reindex(vox, detail::patchify_map(geo.side, geo.patch, embed.c_in),
                         {geo.tokens_per_modality(), geo.patch_volume() * embed.c_in});
  Id proj = tape.add_rowvec(tape.matmul(rows, tape.transpose(bind(embed.weight))),
                            tape.reshape(bind(embed.bias), {1, geo.dim}));
  return tape.add(proj, bind(embed.pos));
}

// One pre-norm block: x + Attn(LN1 x), then + MLP(LN2 x). Low-rank adapters
// apply to whichever attention projections carry them.
template <typename T>
Id transformer_block(Tape<T>& tape, TapeBinder<T>& bind, SegmentationModel<T>& model,
                     int block_idx, Id x) {
  auto& blk = model.blocks[block_idx];
  const ModelGeometry& geo = model.geo;
  const int dh = geo.dim / geo.heads;
  BlockAdapters<T> empty;
  BlockAdapters<T>& ad =
      model.adapters.empty() ? empty : model.adapters[static_cast<size_t>(block_idx)];

  Id h = tape.layer_norm(x, bind(blk.ln1_g), bind(blk.ln1_b), static_cast<T>(geo.ln_eps));
  Id q = adapted_linear(tape, bind, h, bind(blk.wq), model.adapt_cfg, ad.q);
  Id k = adapted_linear(tape, bind, h, bind(blk.wk), model.adapt_cfg, ad.k);
  Id v = adapted_linear(tape, bind, h, bind(blk.wv), model.adapt_cfg, ad.v);
  Id ctx = Id{-1};
  const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int head = 0; head < geo.heads; ++head) {
    Id qh = tape.slice_cols(q, head * dh, (head + 1) * dh);
    Id kh = tape.slice_cols(k, head * dh, (head + 1) * dh);
    Id vh = tape.slice_cols(v, head * dh, (head + 1) * dh);
    Id scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
    Id ctx_h = tape.matmul(tape.softmax_rows(scores), vh);
    ctx = (head == 0) ? ctx_h : tape.concat_cols(ctx, ctx_h);
  }
  Id attn = adapted_linear(tape, bind, ctx, bind(blk.wo), model.adapt_cfg, ad.o);
  Id y = tape.add(x, attn);

  Id h2 = tape.layer_norm(y, bind(blk.ln2_g), bind(blk.ln2_b), static_cast<T>(geo.ln_eps));
  Id mid = tape.gelu(tape.matmul(h2, tape.transpose(bind(blk.w1))));
  Id mlp = tape.matmul(mid, tape.transpose(bind(blk.w2)));
  return tape.add(y, mlp);
}

// Runs every block over the token sequence (single- or joint-modality) and
// returns each block's output; taps pick from this list.
template <typename T>
std::vector<Id> encoder_forward(Tape<T>& tape, TapeBinder<T>& bind, SegmentationModel<T>& model,
                                Id tokens) {
  std::vector<Id> hidden;
  Id x = tokens;
  for (int i = 0; i < model.geo.blocks; ++i) {
    x = transformer_block(tape, bind, model, i, x);
    hidden.push_back(x);
  }
  return hidden;
}

// ---------------------------------------------------------------------------
// Token routing
// ---------------------------------------------------------------------------

// Picks the per-grid-position token rows the decoder consumes. With a joint
// sequence (n_pet > 0) the CT rows come first, then the PET rows; `alternate`
// interleaves the two modalities across grid positions.
template <typename T>
Id route_to_decoder(Tape<T>& tape, Id tap, int n_ct, int n_pet, RoutePolicy policy) {
  const int rows = tape.val(tap).rows();
  if (rows != n_ct + n_pet) throw ConfigError("route_to_decoder: row count mismatch");
  if (n_pet == 0) {
    if (policy != RoutePolicy::ct_only)
      throw ConfigError("route_to_decoder: no PET tokens to route");
    return tap;
  }
  if (n_ct != n_pet) throw ConfigError("route_to_decoder: modality token counts differ");
  std::vector<int> pick(static_cast<size_t>(n_ct));
  for (int i = 0; i < n_ct; ++i) {
    switch (policy) {
      case RoutePolicy::ct_only: pick[i] = i; break;
      case RoutePolicy::pet_only: pick[i] = n_ct + i; break;
      // Zip the two streams: c0, p0, c1, p1, ... truncated to n_ct rows.
      case RoutePolicy::alternate: pick[i] = (i % 2 == 0) ? i / 2 : n_ct + i / 2; break;
    }
  }
  return tape.select_rows(tap, pick);
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

// Four routed taps -> coarse grids -> summed -> x2 stages with channel mixes
// -> fuse with the voxel skip -> per-voxel class logits.
template <typename T>
Id decode(Tape<T>& tape, TapeBinder<T>& bind, SegmentationModel<T>& model,
          const std::vector<Id>& routed_taps, Id skip_z) {
  const ModelGeometry& geo = model.geo;
  const int c = geo.decoder_channels;
  const int g = geo.grid();
  if (routed_taps.size() != model.dec.tap_w.size())
    throw ConfigError("decode: expected one routed tap per tap head");
  Id f = Id{-1};
  for (size_t k = 0; k < routed_taps.size(); ++k) {
    Id proj = tape.add_rowvec(tape.matmul(routed_taps[k], tape.transpose(bind(model.dec.tap_w[k]))),
                              tape.reshape(bind(model.dec.tap_b[k]), {1, 8 * c}));
    Id coarse = tape.reindex(proj, detail::depatch_map(g, c), {8 * g * g * g, c});
    f = (k == 0) ? coarse : tape.add(f, coarse);
  }
  int n = 2 * g;
  for (size_t s = 0; s < model.dec.mix_w.size(); ++s) {
    f = tape.reindex(f, detail::upsample_map(n, c), {8 * n * n * n, c});
    n *= 2;
    f = tape.gelu(tape.add_rowvec(tape.matmul(f, tape.transpose(bind(model.dec.mix_w[s]))),
                                  tape.reshape(bind(model.dec.mix_b[s]), {1, c})));
  }
  if (n != geo.side) throw ConfigError("decode: upsample stages do not reach full resolution");
  Id cat = tape.concat_cols(f, skip_z);
  Id fused = tape.gelu(tape.add_rowvec(tape.matmul(cat, tape.transpose(bind(model.dec.fuse_w))),
                                       tape.reshape(bind(model.dec.fuse_b), {1, c})));
  return tape.add_rowvec(tape.matmul(fused, tape.transpose(bind(model.dec.cls_w))),
                         tape.reshape(bind(model.dec.cls_b), {1, geo.classes}));
}

// ---------------------------------------------------------------------------
// Full forward
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardResult {
  Id logits = -1;        // (voxels x classes)
  Id encoder_last = -1;  // final block output (n_tokens x dim)
  int n_ct_tokens = 0;
  int n_pet_tokens = 0;
};

template <typename T>
Id skip_project(Tape<T>& tape, TapeBinder<T>& bind, SkipPath<T>& skip, Id vox) {
  return tape.add_rowvec(tape.matmul(vox, tape.transpose(bind(skip.weight))),
                         tape.reshape(bind(skip.bias), {1, skip.weight.rows()}));
}

template <typename T>
ForwardResult<T> model_logits(Tape<T>& tape, TapeBinder<T>& bind, SegmentationModel<T>& model,
                              const Volume* ct, const Volume* pet, Mode mode) {
  const ModelGeometry& geo = model.geo;
  const int n = geo.tokens_per_modality();
  ForwardResult<T> out;

  auto need = [](const Volume* v, const char* which) {
    if (!v) throw ConfigError(std::string("forward: mode requires a ") + which + " volume");
    return v;
  };

  if (model.kind == ModelKind::early_fusion) {
    Tensor<T> vox({geo.voxels(), 2});
    const Volume* cv = nullptr;
    const Volume* pv = nullptr;
    if (mode == Mode::ctpet) {
      cv = need(ct, "ct");
      pv = need(pet, "pet");
    } else if (model.allow_zero_fill) {
      if (mode == Mode::ct) cv = need(ct, "ct");
      else pv = need(pet, "pet");
    } else {
      throw ConfigError(
          "forward: this checkpoint fuses both modalities at the input; "
          "single-modality inference needs allow_zero_fill");
    }
    Tensor<T> cm = cv ? detail::voxel_matrix<T>(geo, *cv) : Tensor<T>({geo.voxels(), 1});
    Tensor<T> pm = pv ? detail::voxel_matrix<T>(geo, *pv) : Tensor<T>({geo.voxels(), 1});
    for (int i = 0; i < geo.voxels(); ++i) {
      vox.data[2 * i] = cm.data[i];
      vox.data[2 * i + 1] = pm.data[i];
    }
    Id v = tape.constant(std::move(vox));
    Id tokens = embed_patches(tape, bind, geo, model.embed_ct, v);
    auto hidden = encoder_forward(tape, bind, model, tokens);
    out.encoder_last = hidden.back();
    out.n_ct_tokens = n;
    std::vector<Id> taps;
    const int step = geo.blocks / 4;
    for (int k = 1; k <= 4; ++k) taps.push_back(hidden[static_cast<size_t>(k * step - 1)]);
    Id z = skip_project(tape, bind, model.skip_ct, v);
    out.logits = decode(tape, bind, model, taps, z);
    return out;
  }

  if (model.kind == ModelKind::uni_pet) {
    if (mode != Mode::pet)
      throw ConfigError("forward: this checkpoint consumes PET only");
    Id v = tape.constant(detail::voxel_matrix<T>(geo, *need(pet, "pet")));
    Id tokens = embed_patches(tape, bind, geo, model.embed_ct, v);
    auto hidden = encoder_forward(tape, bind, model, tokens);
    out.encoder_last = hidden.back();
    out.n_ct_tokens = n;
    std::vector<Id> taps;
    const int step = geo.blocks / 4;
    for (int k = 1; k <= 4; ++k) taps.push_back(hidden[static_cast<size_t>(k * step - 1)]);
    Id z = skip_project(tape, bind, model.skip_ct, v);
    out.logits = decode(tape, bind, model, taps, z);
    return out;
  }

  // Single-modality backbone, possibly upgraded with the PET pathway.
  const bool joint_for_ct =
      model.multimodal() && model.ct_inference == CtInference::joint;
  if (mode == Mode::ct && !joint_for_ct) {
    Id v = tape.constant(detail::voxel_matrix<T>(geo, *need(ct, "ct")));
    Id tokens = embed_patches(tape, bind, geo, model.embed_ct, v);
    auto hidden = encoder_forward(tape, bind, model, tokens);
    out.encoder_last = hidden.back();
    out.n_ct_tokens = n;
    std::vector<Id> taps;
    const int step = geo.blocks / 4;
    for (int k = 1; k <= 4; ++k)
      taps.push_back(route_to_decoder<T>(tape, hidden[static_cast<size_t>(k * step - 1)], n, 0,
                                         RoutePolicy::ct_only));
    Id z = skip_project(tape, bind, model.skip_ct, v);
    out.logits = decode(tape, bind, model, taps, z);
    return out;
  }

  if (!model.multimodal())
    throw ConfigError(
        "forward: this checkpoint has no PET pathway; run the multimodal upgrade first");

  // Build the (voxels x 2) channel pair: acquired volumes, or the expander's
  // synthesis when only one modality is present.
  Id ch_ct = -1, ch_pet = -1;
  if (mode == Mode::ctpet) {
    ch_ct = tape.constant(detail::voxel_matrix<T>(geo, *need(ct, "ct")));
    ch_pet = tape.constant(detail::voxel_matrix<T>(geo, *need(pet, "pet")));
  } else {
    const Volume* lone = (mode == Mode::ct) ? need(ct, "ct") : need(pet, "pet");
    Id x = tape.constant(detail::voxel_matrix<T>(geo, *lone));
    Id pair = adapter_expand(tape, bind, *model.adapter, x);
    ch_ct = tape.slice_cols(pair, 0, 1);
    ch_pet = tape.slice_cols(pair, 1, 2);
  }

  Id t_ct = embed_patches(tape, bind, geo, model.embed_ct, ch_ct);
  Id t_pet = embed_patches(tape, bind, geo, *model.embed_pet, ch_pet);
  Id tokens = tape.concat_rows(t_ct, t_pet);
  auto hidden = encoder_forward(tape, bind, model, tokens);
  out.encoder_last = hidden.back();
  out.n_ct_tokens = n;
  out.n_pet_tokens = n;
  std::vector<Id> taps;
  const int step = geo.blocks / 4;
  for (int k = 1; k <= 4; ++k)
    taps.push_back(
        route_to_decoder<T>(tape, hidden[static_cast<size_t>(k * step - 1)], n, n, model.route));
  Id z_ct = skip_project(tape, bind, model.skip_ct, ch_ct);
  Id z_pet = skip_project(tape, bind, *model.skip_pet, ch_pet);
  Id z = skip_combine(tape, z_ct, z_pet, bind(*model.beta));
  out.logits = decode(tape, bind, model, taps, z);
  return out;
}

// Per-voxel class probabilities.
template <typename T>
ForwardResult<T> model_forward(Tape<T>& tape, TapeBinder<T>& bind, SegmentationModel<T>& model,
                               const Volume* ct, const Volume* pet, Mode mode) {
  ForwardResult<T> r = model_logits(tape, bind, model, ct, pet, mode);
  r.logits = tape.softmax_rows(r.logits);
  return r;
}

// ---------------------------------------------------------------------------
// Prognosis
// ---------------------------------------------------------------------------

// Mean over the final block's tokens: one (1 x dim) case embedding.
template <typename T>
Id pooled_embedding(Tape<T>& tape, TapeBinder<T>& bind, SegmentationModel<T>& model,
                    const Volume* ct, const Volume* pet, Mode mode) {
  ForwardResult<T> r = model_logits(tape, bind, model, ct, pet, mode);
  const int rows = tape.val(r.encoder_last).rows();
  return tape.scale(tape.sum_cols(r.encoder_last), static_cast<T>(1.0 / rows));
}

// Two-layer head over case features -> per-bin probability mass.
template <typename T>
Id prognosis_forward(Tape<T>& tape, TapeBinder<T>& bind, PrognosisHead<T>& head, Id features) {
  if (tape.val(features).cols() != head.in_features())
    throw ConfigError("prognosis: feature width mismatch (" +
                      std::to_string(tape.val(features).cols()) + " vs " +
                      std::to_string(head.in_features()) + ")");
  Id h = tape.gelu(tape.add_rowvec(tape.matmul(features, tape.transpose(bind(head.w1))),
                                   tape.reshape(bind(head.b1), {1, head.hidden()})));
  Id logits = tape.add_rowvec(tape.matmul(h, tape.transpose(bind(head.w2))),
                              tape.reshape(bind(head.b2), {1, head.bins()}));
  return tape.softmax_rows(logits);
}

}  // namespace pemma
