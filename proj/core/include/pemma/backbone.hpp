// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pemma/checkpoint.hpp"
#include "pemma/errors.hpp"
#include "pemma/rng.hpp"
#include "pemma/tensor.hpp"

namespace pemma {

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

struct ModelGeometry {
  int side = 32;              // cubic input extent in voxels
  int patch = 8;              // cubic patch extent; power of two so the decoder
                              // can recover full resolution by x2 stages
  int dim = 64;               // token width
  int heads = 4;
  int blocks = 4;             // encoder depth; taps at L/4, L/2, 3L/4, L
  int classes = 3;            // background / tumor / node
  int mlp_ratio = 4;
  int decoder_channels = 8;
  double ln_eps = 1e-5;

  int grid() const { return side / patch; }
  int tokens_per_modality() const { return grid() * grid() * grid(); }
  int voxels() const { return side * side * side; }
  int patch_volume() const { return patch * patch * patch; }
  // Nearest-neighbour x2 stages between the coarse de-patch grid (2x the token
  // grid) and the full voxel grid.
  int upsample_stages() const {
    int s = 0;
    for (int v = patch; v > 2; v /= 2) ++s;
    return s;
  }

  void validate() const {
    if (side <= 0 || patch <= 0) throw ConfigError("geometry: extents must be positive");
    if ((patch & (patch - 1)) != 0 || patch < 2)
      throw ConfigError("geometry: patch extent must be a power of two >= 2");
    if (side % patch != 0) throw ConfigError("geometry: side must be divisible by patch");
    if (dim <= 0 || heads <= 0 || dim % heads != 0)
      throw ConfigError("geometry: token width must be divisible by head count");
    if (blocks < 4 || blocks % 4 != 0)
      throw ConfigError("geometry: block count must be a positive multiple of 4");
    if (classes < 2) throw ConfigError("geometry: need at least two classes");
    if (mlp_ratio < 1 || decoder_channels < 1)
      throw ConfigError("geometry: mlp ratio and decoder channels must be positive");
  }
};

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

template <typename T>
struct PatchEmbedding {
  int c_in = 1;
  Tensor<T> weight;  // (dim, patch^3 * c_in)
  Tensor<T> bias;    // (dim)
  Tensor<T> pos;     // (tokens, dim), learned
};

template <typename T>
struct TransformerBlock {
  Tensor<T> wq, wk, wv, wo;        // (dim, dim), no biases
  Tensor<T> w1;                    // (mlp_ratio*dim, dim)
  Tensor<T> w2;                    // (dim, mlp_ratio*dim)
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;  // (dim)
};

template <typename T>
struct SkipPath {
  int c_in = 1;
  Tensor<T> weight;  // (decoder_channels, c_in)
  Tensor<T> bias;    // (decoder_channels)
};

template <typename T>
struct Decoder {
  // Per tap: linear token -> 2x2x2 sub-cells of decoder channels.
  std::vector<Tensor<T>> tap_w;  // (8*c, dim)
  std::vector<Tensor<T>> tap_b;  // (8*c)
  // Per upsample stage: channel mix after nearest-neighbour x2.
  std::vector<Tensor<T>> mix_w;  // (c, c)
  std::vector<Tensor<T>> mix_b;  // (c)
  Tensor<T> fuse_w;  // (c, 2c) -- concat of decoder stream and voxel skip
  Tensor<T> fuse_b;  // (c)
  Tensor<T> cls_w;   // (classes, c)
  Tensor<T> cls_b;   // (classes)
};

template <typename T>
struct PrognosisHead {
  Tensor<T> w1, b1;  // (hidden, in), (hidden)
  Tensor<T> w2, b2;  // (bins, hidden), (bins)
  int in_features() const { return w1.cols(); }
  int hidden() const { return w1.rows(); }
  int bins() const { return w2.rows(); }
};

// Expands one input channel into two so a single acquired modality can drive
// the two-channel joint path. Initialised to copy the input into channel 0 and
// zero channel 1.
template <typename T>
struct AdapterLayer {
  Tensor<T> weight;  // (2, 1)
  Tensor<T> bias;    // (2)
};

// ---------------------------------------------------------------------------
// Low-rank attention adapters
// ---------------------------------------------------------------------------

enum class AdaptMethod : int { none = 0, lora = 1, dora = 2 };
enum class DoraForm : int { canonical = 0, paper_literal = 1 };
enum class AttnTarget : int { q = 0, k = 1, v = 2, o = 3 };

struct AdaptationConfig {
  AdaptMethod method = AdaptMethod::lora;
  int rank = 4;
  double alpha = 8.0;
  std::vector<AttnTarget> targets = {AttnTarget::q, AttnTarget::v};
  DoraForm dora_form = DoraForm::canonical;

  double scale() const { return alpha / static_cast<double>(rank); }
  void validate() const {
    if (method == AdaptMethod::none) return;
    if (rank <= 0) throw ConfigError("adaptation: rank must be positive");
    if (alpha <= 0) throw ConfigError("adaptation: alpha must be positive");
    if (targets.empty()) throw ConfigError("adaptation: no attention targets selected");
  }
  int target_mask() const {
    int m = 0;
    for (AttnTarget t : targets) m |= 1 << static_cast<int>(t);
    return m;
  }
};

template <typename T>
struct LowRankPair {
  Tensor<T> a;  // (rank, dim)  gaussian init
  Tensor<T> b;  // (dim, rank)  zero init
};

template <typename T>
struct AttnAdapter {
  LowRankPair<T> pair;
  Tensor<T> m;  // (dim) column magnitudes; empty for plain low-rank updates
};

template <typename T>
struct BlockAdapters {
  std::optional<AttnAdapter<T>> q, k, v, o;
  std::optional<AttnAdapter<T>>& slot(AttnTarget t) {
    switch (t) {
      case AttnTarget::q: return q;
      case AttnTarget::k: return k;
      case AttnTarget::v: return v;
      default: return o;
    }
  }
  const std::optional<AttnAdapter<T>>& slot(AttnTarget t) const {
    return const_cast<BlockAdapters*>(this)->slot(t);
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum class ModelKind : int { uni_ct = 0, uni_pet = 1, early_fusion = 2 };
enum class RoutePolicy : int { ct_only = 0, alternate = 1, pet_only = 2 };
// How a joint model serves CT-only requests: `native` runs the original
// single-modality path untouched; `joint` synthesises the second channel
// through the adapter layer and runs the same two-modality float path.
enum class CtInference : int { native = 0, joint = 1 };

template <typename T>
class SegmentationModel {
 public:
  ModelGeometry geo;
  ModelKind kind = ModelKind::uni_ct;

  PatchEmbedding<T> embed_ct;
  std::vector<TransformerBlock<T>> blocks;
  SkipPath<T> skip_ct;
  Decoder<T> dec;

  // Present only after the multimodal upgrade.
  std::optional<PatchEmbedding<T>> embed_pet;
  std::optional<SkipPath<T>> skip_pet;
  std::optional<Tensor<T>> beta;           // scalar (1), init 0
  std::optional<AdapterLayer<T>> adapter;  // 1 -> 2 channel expansion

  AdaptationConfig adapt_cfg{AdaptMethod::none, 0, 0.0, {}, DoraForm::canonical};
  std::vector<BlockAdapters<T>> adapters;  // size == blocks when injected

  std::optional<PrognosisHead<T>> prognosis;

  RoutePolicy route = RoutePolicy::ct_only;
  CtInference ct_inference = CtInference::native;
  bool allow_zero_fill = false;  // early fusion: permit zero-filled channel

  bool multimodal() const { return embed_pet.has_value(); }
  bool adapted() const { return adapt_cfg.method != AdaptMethod::none; }
};

namespace detail {

template <typename T>
inline Tensor<T> gauss_init(std::vector<int> shape, Rng& rng, double sd = 0.02) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.gaussian(0.0, sd));
  return t;
}

template <typename T>
inline Tensor<T> zeros_init(std::vector<int> shape) {
  return Tensor<T>(std::move(shape));
}

template <typename T>
inline Tensor<T> ones_init(std::vector<int> shape) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = T(1);
  return t;
}

}  // namespace detail

template <typename T>
class SegmentationModel;
template <typename T>
std::vector<Tensor<T>*> all_params(SegmentationModel<T>& m);

template <typename T>
PatchEmbedding<T> build_patch_embedding(const ModelGeometry& geo, int c_in, Rng& rng) {
  PatchEmbedding<T> e;
  e.c_in = c_in;
  e.weight = detail::gauss_init<T>({geo.dim, geo.patch_volume() * c_in}, rng);
  e.bias = detail::zeros_init<T>({geo.dim});
  e.pos = detail::gauss_init<T>({geo.tokens_per_modality(), geo.dim}, rng);
  return e;
}

template <typename T>
SkipPath<T> build_skip_path(const ModelGeometry& geo, int c_in, Rng& rng) {
  SkipPath<T> s;
  s.c_in = c_in;
  s.weight = detail::gauss_init<T>({geo.decoder_channels, c_in}, rng);
  s.bias = detail::zeros_init<T>({geo.decoder_channels});
  return s;
}

template <typename T>
SegmentationModel<T> build_model(const ModelGeometry& geo, uint64_t seed,
                                 ModelKind kind = ModelKind::uni_ct) {
  geo.validate();
  SegmentationModel<T> model;
  model.geo = geo;
  model.kind = kind;
  Rng rng(seed);
  const int c_in = (kind == ModelKind::early_fusion) ? 2 : 1;
  model.embed_ct = build_patch_embedding<T>(geo, c_in, rng);
  model.blocks.resize(geo.blocks);
  for (auto& b : model.blocks) {
    b.wq = detail::gauss_init<T>({geo.dim, geo.dim}, rng);
    b.wk = detail::gauss_init<T>({geo.dim, geo.dim}, rng);
    b.wv = detail::gauss_init<T>({geo.dim, geo.dim}, rng);
    b.wo = detail::gauss_init<T>({geo.dim, geo.dim}, rng);
    b.w1 = detail::gauss_init<T>({geo.mlp_ratio * geo.dim, geo.dim}, rng);
    b.w2 = detail::gauss_init<T>({geo.dim, geo.mlp_ratio * geo.dim}, rng);
    b.ln1_g = detail::ones_init<T>({geo.dim});
    b.ln1_b = detail::zeros_init<T>({geo.dim});
    b.ln2_g = detail::ones_init<T>({geo.dim});
    b.ln2_b = detail::zeros_init<T>({geo.dim});
  }
  model.skip_ct = build_skip_path<T>(geo, c_in, rng);
  const int c = geo.decoder_channels;
  for (int k = 0; k < 4; ++k) {
    model.dec.tap_w.push_back(detail::gauss_init<T>({8 * c, geo.dim}, rng));
    model.dec.tap_b.push_back(detail::zeros_init<T>({8 * c}));
  }
  for (int s = 0; s < geo.upsample_stages(); ++s) {
    model.dec.mix_w.push_back(detail::gauss_init<T>({c, c}, rng));
    model.dec.mix_b.push_back(detail::zeros_init<T>({c}));
  }
  model.dec.fuse_w = detail::gauss_init<T>({c, 2 * c}, rng);
  model.dec.fuse_b = detail::zeros_init<T>({c});
  model.dec.cls_w = detail::gauss_init<T>({geo.classes, c}, rng);
  model.dec.cls_b = detail::zeros_init<T>({geo.classes});
  for (auto& t : all_params(model)) t->requires_grad = true;
  return model;
}

template <typename T>
PrognosisHead<T> build_prognosis_head(int in_features, int hidden, int bins, uint64_t seed) {
  if (in_features <= 0 || hidden <= 0 || bins < 2)
    throw ConfigError("prognosis head: bad dimensions");
  Rng rng(seed);
  PrognosisHead<T> h;
  h.w1 = detail::gauss_init<T>({hidden, in_features}, rng);
  h.b1 = detail::zeros_init<T>({hidden});
  // Zero final layer: the untrained head emits a uniform distribution over
  // bins, which pins the pre-training concordance index at exactly one half.
  h.w2 = detail::zeros_init<T>({bins, hidden});
  h.b2 = detail::zeros_init<T>({bins});
  h.w1.requires_grad = h.b1.requires_grad = true;
  h.w2.requires_grad = h.b2.requires_grad = true;
  return h;
}

// ---------------------------------------------------------------------------
// Parameter enumeration (fixed order; checkpoint and optimizer contract)
// ---------------------------------------------------------------------------

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
  ParamGroup group;
};

template <typename T>
std::vector<NamedParam<T>> named_params(SegmentationModel<T>& m) {
  std::vector<NamedParam<T>> out;
  auto add = [&out](std::string name, Tensor<T>& t, ParamGroup g) {
    out.push_back({std::move(name), &t, g});
  };
  add("embed.ct.weight", m.embed_ct.weight, ParamGroup::base);
  add("embed.ct.bias", m.embed_ct.bias, ParamGroup::base);
  add("embed.ct.pos", m.embed_ct.pos, ParamGroup::base);
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "enc.block" + std::to_string(i) + ".";
    add(p + "attn.wq", b.wq, ParamGroup::base);
    add(p + "attn.wk", b.wk, ParamGroup::base);
    add(p + "attn.wv", b.wv, ParamGroup::base);
    add(p + "attn.wo", b.wo, ParamGroup::base);
    add(p + "mlp.w1", b.w1, ParamGroup::base);
    add(p + "mlp.w2", b.w2, ParamGroup::base);
    add(p + "ln1.gamma", b.ln1_g, ParamGroup::base);
    add(p + "ln1.beta", b.ln1_b, ParamGroup::base);
    add(p + "ln2.gamma", b.ln2_g, ParamGroup::base);
    add(p + "ln2.beta", b.ln2_b, ParamGroup::base);
  }
  add("skip.ct.weight", m.skip_ct.weight, ParamGroup::base);
  add("skip.ct.bias", m.skip_ct.bias, ParamGroup::base);
  for (size_t k = 0; k < m.dec.tap_w.size(); ++k) {
    add("dec.tap" + std::to_string(k) + ".weight", m.dec.tap_w[k], ParamGroup::base);
    add("dec.tap" + std::to_string(k) + ".bias", m.dec.tap_b[k], ParamGroup::base);
  }
  for (size_t s = 0; s < m.dec.mix_w.size(); ++s) {
    add("dec.mix" + std::to_string(s) + ".weight", m.dec.mix_w[s], ParamGroup::base);
    add("dec.mix" + std::to_string(s) + ".bias", m.dec.mix_b[s], ParamGroup::base);
  }
  add("dec.fuse.weight", m.dec.fuse_w, ParamGroup::base);
  add("dec.fuse.bias", m.dec.fuse_b, ParamGroup::base);
  add("dec.cls.weight", m.dec.cls_w, ParamGroup::base);
  add("dec.cls.bias", m.dec.cls_b, ParamGroup::base);
  if (m.embed_pet) {
    add("embed.pet.weight", m.embed_pet->weight, ParamGroup::pe_pet);
    add("embed.pet.bias", m.embed_pet->bias, ParamGroup::pe_pet);
    add("embed.pet.pos", m.embed_pet->pos, ParamGroup::pe_pet);
  }
  if (m.skip_pet) {
    add("skip.pet.weight", m.skip_pet->weight, ParamGroup::sk_pet);
    add("skip.pet.bias", m.skip_pet->bias, ParamGroup::sk_pet);
  }
  if (m.beta) add("skip.beta", *m.beta, ParamGroup::sk_pet);
  if (m.adapter) {
    add("adapter.weight", m.adapter->weight, ParamGroup::adapter);
    add("adapter.bias", m.adapter->bias, ParamGroup::adapter);
  }
  for (size_t i = 0; i < m.adapters.size(); ++i) {
    const std::string p = "peft.block" + std::to_string(i) + ".";
    for (AttnTarget t : {AttnTarget::q, AttnTarget::k, AttnTarget::v, AttnTarget::o}) {
      auto& slot = m.adapters[i].slot(t);
      if (!slot) continue;
      static const char* tn[] = {"q", "k", "v", "o"};
      const std::string q = p + tn[static_cast<int>(t)] + ".";
      add(q + "a", slot->pair.a, ParamGroup::peft);
      add(q + "b", slot->pair.b, ParamGroup::peft);
      if (!slot->m.data.empty()) add(q + "m", slot->m, ParamGroup::peft);
    }
  }
  if (m.prognosis) {
    add("prog.w1", m.prognosis->w1, ParamGroup::head);
    add("prog.b1", m.prognosis->b1, ParamGroup::head);
    add("prog.w2", m.prognosis->w2, ParamGroup::head);
    add("prog.b2", m.prognosis->b2, ParamGroup::head);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>*> trainable_params(SegmentationModel<T>& m) {
  std::vector<Tensor<T>*> out;
  for (auto& p : named_params(m))
    if (p.tensor->requires_grad) out.push_back(p.tensor);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> all_params(SegmentationModel<T>& m) {
  std::vector<Tensor<T>*> out;
  for (auto& p : named_params(m)) out.push_back(p.tensor);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint bridge
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr int kMetaLen = 21;
inline const char* kMetaName = "meta.model";
}  // namespace detail

template <typename T>
Checkpoint to_checkpoint(SegmentationModel<T>& m) {
  Checkpoint ckpt;
  {
    CheckpointEntry meta;
    meta.name = detail::kMetaName;
    meta.group = ParamGroup::aux;
    meta.frozen = true;
    meta.shape = {detail::kMetaLen};
    meta.data.assign(detail::kMetaLen, 0.0f);
    auto& v = meta.data;
    v[0] = 1.0f;  // layout revision
    v[1] = static_cast<float>(m.kind);
    v[2] = static_cast<float>(m.geo.side);
    v[3] = static_cast<float>(m.geo.patch);
    v[4] = static_cast<float>(m.geo.dim);
    v[5] = static_cast<float>(m.geo.heads);
    v[6] = static_cast<float>(m.geo.blocks);
    v[7] = static_cast<float>(m.geo.classes);
    v[8] = static_cast<float>(m.geo.mlp_ratio);
    v[9] = static_cast<float>(m.geo.decoder_channels);
    v[10] = static_cast<float>(m.embed_ct.c_in);
    v[11] = m.multimodal() ? 1.0f : 0.0f;
    v[12] = static_cast<float>(m.adapt_cfg.method);
    v[13] = static_cast<float>(m.adapt_cfg.rank);
    v[14] = static_cast<float>(m.adapt_cfg.alpha);
    v[15] = static_cast<float>(m.adapt_cfg.dora_form);
    v[16] = static_cast<float>(m.adapt_cfg.target_mask());
    v[17] = m.prognosis ? 1.0f : 0.0f;
    v[18] = m.prognosis ? static_cast<float>(m.prognosis->hidden()) : 0.0f;
    v[19] = m.prognosis ? static_cast<float>(m.prognosis->bins()) : 0.0f;
    v[20] = m.prognosis ? static_cast<float>(m.prognosis->in_features()) : 0.0f;
    ckpt.entries.push_back(std::move(meta));
  }
  for (auto& p : named_params(m)) {
    CheckpointEntry e;
    e.name = p.name;
    e.group = p.group;
    e.frozen = !p.tensor->requires_grad;
    e.shape = p.tensor->shape;
    e.data.resize(p.tensor->data.size());
    for (size_t i = 0; i < e.data.size(); ++i)
      e.data[i] = static_cast<float>(p.tensor->data[i]);
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

template <typename T>
void save_model(SegmentationModel<T>& m, const std::string& path) {
  Checkpoint ckpt = to_checkpoint(m);
  save_checkpoint(path, ckpt);
}

template <typename T>
SegmentationModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  const CheckpointEntry* meta = ckpt.find(detail::kMetaName);
  if (!meta || meta->data.size() != static_cast<size_t>(detail::kMetaLen))
    throw DataError("checkpoint: missing or malformed model descriptor entry");
  const auto& v = meta->data;
  if (v[0] != 1.0f) throw DataError("checkpoint: unsupported model descriptor revision");
  ModelGeometry geo;
  geo.side = static_cast<int>(v[2]);
  geo.patch = static_cast<int>(v[3]);
  geo.dim = static_cast<int>(v[4]);
  geo.heads = static_cast<int>(v[5]);
  geo.blocks = static_cast<int>(v[6]);
  geo.classes = static_cast<int>(v[7]);
  geo.mlp_ratio = static_cast<int>(v[8]);
  geo.decoder_channels = static_cast<int>(v[9]);
  geo.validate();
  SegmentationModel<T> m = build_model<T>(geo, 0, static_cast<ModelKind>(static_cast<int>(v[1])));
  if (static_cast<int>(v[10]) != m.embed_ct.c_in)
    throw DataError("checkpoint: channel count does not match model kind");
  if (v[11] != 0.0f) {
    Rng rng(0);
    m.embed_pet = build_patch_embedding<T>(geo, 1, rng);
    m.skip_pet = build_skip_path<T>(geo, 1, rng);
    m.beta = Tensor<T>({1});
    m.adapter = AdapterLayer<T>{Tensor<T>({2, 1}), Tensor<T>({2})};
  }
  AdaptationConfig cfg;
  cfg.method = static_cast<AdaptMethod>(static_cast<int>(v[12]));
  if (cfg.method != AdaptMethod::none) {
    cfg.rank = static_cast<int>(v[13]);
    cfg.alpha = static_cast<double>(v[14]);
    cfg.dora_form = static_cast<DoraForm>(static_cast<int>(v[15]));
    cfg.targets.clear();
    const int mask = static_cast<int>(v[16]);
    for (AttnTarget t : {AttnTarget::q, AttnTarget::k, AttnTarget::v, AttnTarget::o})
      if (mask & (1 << static_cast<int>(t))) cfg.targets.push_back(t);
    cfg.validate();
    m.adapt_cfg = cfg;
    m.adapters.resize(geo.blocks);
    for (auto& ba : m.adapters)
      for (AttnTarget t : cfg.targets) {
        AttnAdapter<T> ad;
        ad.pair.a = Tensor<T>({cfg.rank, geo.dim});
        ad.pair.b = Tensor<T>({geo.dim, cfg.rank});
        if (cfg.method == AdaptMethod::dora && cfg.dora_form == DoraForm::canonical)
          ad.m = Tensor<T>({geo.dim});
        ba.slot(t) = std::move(ad);
      }
  } else {
    m.adapt_cfg = AdaptationConfig{AdaptMethod::none, 0, 0.0, {}, DoraForm::canonical};
  }
  if (v[17] != 0.0f) {
    m.prognosis = build_prognosis_head<T>(static_cast<int>(v[20]), static_cast<int>(v[18]),
                                          static_cast<int>(v[19]), 0);
  }
  // Fill values and frozen flags; every parameter must be present with the
  // exact shape, and the checkpoint may not carry unknown parameter entries.
  auto params = named_params(m);
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ckpt.entries)
    if (e.name != detail::kMetaName) by_name.emplace(e.name, &e);
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint: missing parameter " + p.name);
    const CheckpointEntry& e = *it->second;
    if (e.shape != p.tensor->shape)
      throw DataError("checkpoint: shape mismatch for " + p.name + " (file " +
                      shape_to_string(e.shape) + ", model " + shape_to_string(p.tensor->shape) + ")");
    for (size_t i = 0; i < e.data.size(); ++i)
      p.tensor->data[i] = static_cast<T>(e.data[i]);
    p.tensor->requires_grad = !e.frozen;
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw DataError("checkpoint: unknown parameter " + by_name.begin()->first);
  return m;
}

template <typename T>
SegmentationModel<T> load_model(const std::string& path) {
  return model_from_checkpoint<T>(load_checkpoint(path));
}

}  // namespace pemma
