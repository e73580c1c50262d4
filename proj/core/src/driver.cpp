// SPDX-License-Identifier: Apache-2.0
#include "pemma/driver.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pemma/adaptation.hpp"
#include "pemma/ehr.hpp"
#include "pemma/errors.hpp"
#include "pemma/forward.hpp"
#include "pemma/fusion.hpp"
#include "pemma/losses.hpp"
#include "pemma/metrics.hpp"
#include "pemma/modality.hpp"
#include "pemma/optimizer.hpp"

namespace pemma {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Small file utilities
// ---------------------------------------------------------------------------

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(12) << v;
  return out.str();
}

void write_text(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << content;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string run_name(const std::string& out_dir) {
  fs::path p = fs::path(out_dir).lexically_normal();
  std::string name = p.filename().string();
  if (name.empty() || name == ".") name = p.parent_path().filename().string();
  return name.empty() ? std::string("run") : name;
}

std::string hash_hex(uint64_t h) {
  std::ostringstream out;
  out << "0x" << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

json group_hashes(const Checkpoint& ckpt) {
  json out = json::object();
  for (ParamGroup g : {ParamGroup::base, ParamGroup::pe_pet, ParamGroup::peft, ParamGroup::sk_pet,
                       ParamGroup::adapter, ParamGroup::head})
    if (ckpt.has_group(g)) out[param_group_name(g)] = hash_hex(checkpoint_group_hash(ckpt, g));
  return out;
}

void write_run_record(const RunConfig& cfg, const RunResult& result, json extras) {
  json rec;
  rec["version"] = 1;
  rec["stage"] = stage_name(cfg.stage);
  rec["run"] = run_name(cfg.out_dir);
  rec["config"] = json::parse(run_config_to_json(cfg));
  rec["steps_run"] = result.steps_run;
  rec["final_loss"] = result.final_loss;
  json arts = json::object();
  for (const auto& [label, path] : result.artifacts) arts[label] = fs::path(path).filename().string();
  rec["artifacts"] = arts;
  for (auto it = extras.begin(); it != extras.end(); ++it) rec[it.key()] = it.value();
  write_text(fs::path(cfg.out_dir) / ("run_" + std::string(stage_name(cfg.stage)) + ".json"),
             rec.dump(2) + "\n");
}

// Fraction line as printed by the parameter report, so downstream tables can
// quote it verbatim.
std::string fraction_text(const fs::path& report_path) {
  if (!fs::exists(report_path)) return {};
  std::istringstream in(read_text(report_path));
  std::string line;
  const std::string key = "trainable fraction: ";
  while (std::getline(in, line))
    if (line.rfind(key, 0) == 0) return line.substr(key.size());
  return {};
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

CenterManifest load_manifest(const RunConfig& cfg) {
  if (cfg.manifest_path.empty()) throw ConfigError("config: manifest path is required");
  CenterManifest man = parse_manifest(cfg.manifest_path);
  man.validate();
  return man;
}

std::vector<CaseSample> load_split_cases(const CenterManifest& man, Split split,
                                         const std::string& center_filter, bool train) {
  std::vector<CaseSample> out;
  for (const CenterSpec* c : man.by_split(split)) {
    if (!center_filter.empty() && c->name != center_filter) continue;
    std::vector<CaseSample> cases = train ? generate_train_cases(*c) : generate_eval_cases(*c);
    for (auto& cs : cases) {
      preprocess_intensities(cs);
      out.push_back(std::move(cs));
    }
  }
  if (out.empty())
    throw DataError(std::string("manifest provides no ") + (train ? "training" : "held-out") +
                    " cases for the " + split_name(split) + " split" +
                    (center_filter.empty() ? "" : " at center " + center_filter));
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LogRow {
  int step = 0;
  Mode mode = Mode::ct;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainOptions {
  double lr = 1e-3;
  int steps = 100;
  int patience = 20;
  double weight_decay = 1e-5;
  double fg_weight = 16.0;
  bool augment = false;
  bool sample_mode = false;        // draw the per-step modality from `dropout`
  ModalityDropout dropout;
  std::vector<Mode> mode_cycle = {Mode::ct};  // used when !sample_mode
  Mode probe_mode = Mode::ct;      // validation-check modality
  uint64_t seed = 1;
};

struct TrainStats {
  int steps_run = 0;
  double final_loss = 0.0;
};

const Volume* pick_ct(const CaseSample& c, Mode mode) { return mode == Mode::pet ? nullptr : &c.ct; }
const Volume* pick_pet(const CaseSample& c, Mode mode) { return mode == Mode::ct ? nullptr : &c.pet; }

// Lesions cover a few percent of the voxels; upweighting them in the
// cross-entropy keeps the optimum away from the all-background prediction.
std::vector<double> lesion_weights(int classes, double fg_weight) {
  std::vector<double> w(static_cast<size_t>(classes), fg_weight);
  w[0] = 1.0;
  return w;
}

double probe_loss(SegmentationModel<float>& model, const CaseSample& c, Mode mode,
                  const std::vector<double>& weights) {
  const int side = model.geo.side;
  CaseSample cropped;
  const CaseSample* use = &c;
  if (c.ct.nx != side) {
    const int off = (c.ct.nx - side) / 2;
    cropped.ct = crop_volume(c.ct, off, off, off, side);
    cropped.pet = crop_volume(c.pet, off, off, off, side);
    cropped.mask = crop_labels(c.mask, off, off, off, side);
    use = &cropped;
  }
  Tape<float> tape;
  TapeBinder<float> bind(tape);
  auto r = model_logits(tape, bind, model, pick_ct(*use, mode), pick_pet(*use, mode), mode);
  return static_cast<double>(
      tape.val(dice_ce_loss(tape, r.logits, use->mask.data, weights)).data[0]);
}

TrainStats train_segmentation(SegmentationModel<float>& model, const std::vector<CaseSample>& cases,
                              const TrainOptions& opt, std::vector<LogRow>& log) {
  if (cases.empty()) throw DataError("training: empty case list");
  if (opt.steps <= 0) throw ConfigError("training: step count must be positive");
  const int side = model.geo.side;
  for (const CaseSample& c : cases)
    if (c.ct.nx < side || c.ct.ny < side || c.ct.nz < side)
      throw DataError("training: case " + c.id + " is smaller than the model grid");

  std::vector<Tensor<float>*> trainables = trainable_params(model);
  if (trainables.empty()) throw ConfigError("training: model has no trainable parameters");
  const std::vector<double> weights = lesion_weights(model.geo.classes, opt.fg_weight);
  AdamWConfig ocfg;
  ocfg.lr0 = opt.lr;
  ocfg.total_steps = opt.steps;
  ocfg.weight_decay = opt.weight_decay;
  AdamW<float> optim(trainables, ocfg);

  Rng root(opt.seed);
  Rng order_rng = root.split(11);
  Rng mode_rng = root.split(12);
  Rng aug_rng = root.split(13);
  Rng patch_rng = root.split(14);

  std::vector<size_t> order(cases.size());
  std::iota(order.begin(), order.end(), size_t{0});
  size_t cursor = order.size();  // forces a shuffle on the first step
  auto next_case = [&]() -> const CaseSample& {
    if (cursor >= order.size()) {
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(order_rng.uniform_int(0, static_cast<int>(i) - 1))]);
      cursor = 0;
    }
    return cases[order[cursor++]];
  };

  // Validation checks: probe the first case at a fixed cadence; stop after
  // `patience` checks without improvement and keep the weights that scored
  // best, so a run that degrades past its peak still returns the peak state.
  const int check_every = std::max(1, opt.steps / 20);
  double best_probe = std::numeric_limits<double>::infinity();
  int bad_checks = 0;
  std::vector<std::vector<float>> best_state;
  auto snapshot = [&]() {
    best_state.resize(trainables.size());
    for (size_t i = 0; i < trainables.size(); ++i) best_state[i] = trainables[i]->data;
  };
  auto restore_best = [&]() {
    if (best_state.empty()) return;
    for (size_t i = 0; i < trainables.size(); ++i) trainables[i]->data = best_state[i];
  };

  TrainStats stats;
  for (int step = 0; step < opt.steps; ++step) {
    const double lr_now = optim.current_lr();
    const Mode mode = opt.sample_mode ? sample_modality_mode(mode_rng, opt.dropout)
                                      : opt.mode_cycle[static_cast<size_t>(step) % opt.mode_cycle.size()];
    const CaseSample& picked = next_case();

    CaseSample sample;
    if (picked.ct.nx == side) {
      sample = picked;
    } else {
      // Oversized case: cut one model-sized patch, lesion-containing vs
      // background-only at 2:1. Backgrounds can be impossible when lesions
      // reach everywhere; fall back to a lesion patch then.
      const bool want_fg = (step % 3) != 2;
      auto cut = [&](int pos, int neg) {
        std::vector<PatchSample> ps = sample_patches(picked, side, pos, neg, 1, patch_rng);
        sample.ct = std::move(ps[0].ct);
        sample.pet = std::move(ps[0].pet);
        sample.mask = std::move(ps[0].mask);
        sample.preprocessed = true;
      };
      if (want_fg) {
        cut(1, 0);
      } else {
        try {
          cut(0, 1);
        } catch (const DataError&) {
          cut(1, 0);
        }
      }
    }
    if (opt.augment) augment_case(sample, aug_rng);

    Tape<float> tape;
    TapeBinder<float> bind(tape);
    auto r = model_logits(tape, bind, model, pick_ct(sample, mode), pick_pet(sample, mode), mode);
    Id loss = dice_ce_loss(tape, r.logits, sample.mask.data, weights);
    const double lv = static_cast<double>(tape.val(loss).data[0]);
    if (!std::isfinite(lv))
      throw NumericError("training: non-finite loss at step " + std::to_string(step));
    tape.backward(loss);
    optim.step();

    log.push_back({step, mode, lr_now, lv});
    stats.final_loss = lv;
    stats.steps_run = step + 1;

    if ((step + 1) % check_every == 0 || step + 1 == opt.steps) {
      const double probe = probe_loss(model, cases.front(), opt.probe_mode, weights);
      if (probe < best_probe - 1e-6) {
        best_probe = probe;
        bad_checks = 0;
        snapshot();
      } else if (++bad_checks >= opt.patience) {
        break;
      }
    }
  }
  restore_best();
  return stats;
}

void write_train_log(const fs::path& path, const std::vector<LogRow>& log) {
  std::ostringstream out;
  out << "step,mode,lr,loss\n";
  for (const LogRow& row : log)
    out << row.step << ',' << mode_name(row.mode) << ',' << fmt(row.lr) << ',' << fmt(row.loss)
        << '\n';
  write_text(path, out.str());
}

void require_geometry_match(const ModelGeometry& a, const ModelGeometry& b) {
  if (a.side != b.side || a.patch != b.patch || a.dim != b.dim || a.heads != b.heads ||
      a.blocks != b.blocks || a.classes != b.classes || a.mlp_ratio != b.mlp_ratio ||
      a.decoder_channels != b.decoder_channels)
    throw ConfigError("config: geometry disagrees with the checkpoint in the output directory");
}

fs::path out_path(const RunConfig& cfg, const char* name) { return fs::path(cfg.out_dir) / name; }

void ensure_out_dir(const RunConfig& cfg) { fs::create_directories(cfg.out_dir); }

void require_artifact(const RunConfig& cfg, const char* name, const std::string& hint) {
  if (!fs::exists(out_path(cfg, name)))
    throw ConfigError(std::string("missing ") + name + " in '" + cfg.out_dir + "'; " + hint);
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoint delta
// ---------------------------------------------------------------------------

Checkpoint delta_checkpoint(const Checkpoint& full) {
  Checkpoint out;
  bool meta_seen = false;
  for (const CheckpointEntry& e : full.entries) {
    if (e.name == detail::kMetaName) {
      out.entries.push_back(e);
      meta_seen = true;
    } else if (e.group != ParamGroup::base) {
      out.entries.push_back(e);
    }
  }
  if (!meta_seen) throw DataError("delta: checkpoint has no model descriptor entry");
  return out;
}

Checkpoint apply_delta(const Checkpoint& base, const Checkpoint& delta) {
  const CheckpointEntry* meta = delta.find(detail::kMetaName);
  if (!meta) throw DataError("delta: missing model descriptor entry");
  std::set<std::string> delta_names;
  for (const CheckpointEntry& e : delta.entries) delta_names.insert(e.name);

  Checkpoint out;
  out.entries.push_back(*meta);
  for (const CheckpointEntry& e : base.entries) {
    if (e.name == detail::kMetaName) continue;
    if (e.group != ParamGroup::base)
      throw DataError("delta: backbone snapshot already carries adaptation entries");
    if (delta_names.count(e.name))
      throw DataError("delta: entry '" + e.name + "' collides with the backbone snapshot");
    CheckpointEntry frozen = e;
    frozen.frozen = true;  // the delta was trained on top of a frozen backbone
    out.entries.push_back(std::move(frozen));
  }
  for (const CheckpointEntry& e : delta.entries)
    if (e.name != detail::kMetaName) out.entries.push_back(e);
  return out;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

std::vector<double> predict_probabilities(SegmentationModel<float>& model, const Volume* ct,
                                          const Volume* pet, Mode mode) {
  const Volume* ref = ct ? ct : pet;
  if (!ref) throw ConfigError("predict: at least one input volume is required");
  if (ct && pet && (ct->nx != pet->nx || ct->ny != pet->ny || ct->nz != pet->nz))
    throw DataError("predict: volume extents differ between channels");
  if (ref->nx != ref->ny || ref->nx != ref->nz)
    throw DataError("predict: expected a cubic volume");

  const int S = ref->nx;
  const int D = model.geo.side;
  const int C = model.geo.classes;
  if (S < D) throw DataError("predict: volume is smaller than the model grid");

  std::vector<int> starts;
  for (int s = 0; s + D <= S; s += D) starts.push_back(s);
  if (starts.back() + D < S) starts.push_back(S - D);  // tail-aligned final tile

  std::vector<double> accum(static_cast<size_t>(S) * S * S * C, 0.0);
  std::vector<int> hits(static_cast<size_t>(S) * S * S, 0);

  for (int z0 : starts)
    for (int y0 : starts)
      for (int x0 : starts) {
        Volume tile_ct, tile_pet;
        const Volume* pct = nullptr;
        const Volume* ppt = nullptr;
        if (ct) {
          tile_ct = crop_volume(*ct, x0, y0, z0, D);
          pct = &tile_ct;
        }
        if (pet) {
          tile_pet = crop_volume(*pet, x0, y0, z0, D);
          ppt = &tile_pet;
        }
        Tape<float> tape;
        TapeBinder<float> bind(tape);
        auto r = model_forward(tape, bind, model, pct, ppt, mode);
        const Tensor<float>& probs = tape.val(r.logits);  // no tape growth past this point
        for (int lz = 0; lz < D; ++lz)
          for (int ly = 0; ly < D; ++ly)
            for (int lx = 0; lx < D; ++lx) {
              const int row = (lz * D + ly) * D + lx;
              const size_t vox = (static_cast<size_t>(z0 + lz) * S + (y0 + ly)) * S + (x0 + lx);
              for (int c = 0; c < C; ++c)
                accum[vox * C + c] += static_cast<double>(probs.at(row, c));
              ++hits[vox];
            }
      }
  for (size_t v = 0; v < hits.size(); ++v)
    for (int c = 0; c < C; ++c) accum[v * C + c] /= hits[v];
  return accum;
}

std::vector<uint8_t> argmax_labels(const std::vector<double>& probs, int classes) {
  if (classes <= 0 || probs.size() % classes != 0)
    throw ConfigError("argmax: probability row width does not divide the buffer");
  std::vector<uint8_t> out(probs.size() / classes);
  for (size_t v = 0; v < out.size(); ++v) {
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (probs[v * classes + c] > probs[v * classes + best]) best = c;
    out[v] = static_cast<uint8_t>(best);
  }
  return out;
}

std::vector<uint8_t> predict_labels(SegmentationModel<float>& model, const Volume* ct,
                                    const Volume* pet, Mode mode) {
  return argmax_labels(predict_probabilities(model, ct, pet, mode), model.geo.classes);
}

DiceRow evaluate_case(SegmentationModel<float>& model, const CaseSample& c, Mode mode) {
  std::vector<uint8_t> pred = predict_labels(model, pick_ct(c, mode), pick_pet(c, mode), mode);
  DiceRow row;
  row.center = c.center;
  row.mode = mode;
  row.tumor = dice_score(pred, c.mask.data, 1);
  row.lymph = dice_score(pred, c.mask.data, 2);
  row.average = 0.5 * (row.tumor + row.lymph);
  return row;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

RunResult run_pretrain(const RunConfig& cfg) {
  cfg.validate();
  ensure_out_dir(cfg);
  CenterManifest man = load_manifest(cfg);
  std::vector<CaseSample> cases = load_split_cases(man, Split::pretrain, "", true);

  SegmentationModel<float> model = build_model<float>(cfg.geometry, cfg.seed, ModelKind::uni_ct);

  TrainOptions opt;
  opt.lr = cfg.resolved_lr();
  opt.steps = cfg.resolved_steps();
  opt.patience = cfg.patience;
  opt.weight_decay = cfg.weight_decay;
  opt.fg_weight = cfg.fg_weight;
  opt.augment = cfg.augment;
  opt.mode_cycle = {Mode::ct};
  opt.probe_mode = Mode::ct;
  opt.seed = cfg.seed;

  std::vector<LogRow> log;
  TrainStats stats = train_segmentation(model, cases, opt, log);

  RunResult result;
  result.stage = cfg.stage;
  result.out_dir = cfg.out_dir;
  result.steps_run = stats.steps_run;
  result.final_loss = stats.final_loss;

  Checkpoint ckpt = to_checkpoint(model);
  save_checkpoint(out_path(cfg, artifact::kBase), ckpt);
  write_text(out_path(cfg, artifact::kParamReport), param_report(ledger_of(model)));
  write_train_log(out_path(cfg, artifact::kTrainLog), log);
  result.artifacts["checkpoint"] = out_path(cfg, artifact::kBase).string();
  result.artifacts["param_report"] = out_path(cfg, artifact::kParamReport).string();
  result.artifacts["train_log"] = out_path(cfg, artifact::kTrainLog).string();

  write_run_record(cfg, result, {{"hashes", group_hashes(ckpt)}, {"train_label", "ct"}});
  return result;
}

RunResult run_adapt(const RunConfig& cfg) {
  cfg.validate();
  ensure_out_dir(cfg);
  CenterManifest man = load_manifest(cfg);
  require_artifact(cfg, artifact::kBase, "run the pretrain stage first");
  Checkpoint base_ckpt = load_checkpoint(out_path(cfg, artifact::kBase));
  SegmentationModel<float> base = model_from_checkpoint<float>(base_ckpt);
  require_geometry_match(cfg.geometry, base.geo);
  if (base.kind != ModelKind::uni_ct || base.multimodal() || base.adapted())
    throw ConfigError("adapt: the backbone checkpoint must be the plain single-channel model");

  std::vector<CaseSample> cases = load_split_cases(man, Split::adapt, "", true);

  TrainOptions opt;
  opt.lr = cfg.resolved_lr();
  opt.steps = cfg.resolved_steps();
  opt.patience = cfg.patience;
  opt.weight_decay = cfg.weight_decay;
  opt.fg_weight = cfg.fg_weight;
  opt.augment = cfg.augment;
  opt.seed = cfg.seed;

  RunResult result;
  result.stage = cfg.stage;
  result.out_dir = cfg.out_dir;
  std::vector<LogRow> log;
  json extras;

  if (cfg.method == Method::pemma_lora || cfg.method == Method::pemma_dora) {
    SegmentationModel<float> model = std::move(base);
    upgrade_to_multimodal(model, parse_pet_init(cfg.pet_init), cfg.seed + 101);
    inject_adapters(model, cfg.adaptation(), cfg.seed + 202);
    model.ct_inference = CtInference::joint;  // CT-only steps train the channel expander

    opt.sample_mode = true;
    opt.dropout = cfg.dropout;
    opt.probe_mode = Mode::ctpet;
    TrainStats stats = train_segmentation(model, cases, opt, log);
    result.steps_run = stats.steps_run;
    result.final_loss = stats.final_loss;

    Checkpoint full = to_checkpoint(model);
    if (checkpoint_group_hash(full, ParamGroup::base) !=
        checkpoint_group_hash(base_ckpt, ParamGroup::base))
      throw std::logic_error("internal error: frozen backbone changed during adaptation");
    save_checkpoint(out_path(cfg, artifact::kAdapted), full);
    save_checkpoint(out_path(cfg, artifact::kDelta), delta_checkpoint(full));
    write_text(out_path(cfg, artifact::kParamReport), param_report(ledger_of(model)));
    result.artifacts["checkpoint"] = out_path(cfg, artifact::kAdapted).string();
    result.artifacts["delta"] = out_path(cfg, artifact::kDelta).string();
    extras["hashes"] = group_hashes(full);
    extras["trainable_fraction"] = ledger_of(model).trainable_fraction();
  } else if (cfg.method == Method::early) {
    SegmentationModel<float> model =
        build_early_fusion_from_base(base, parse_pet_init(cfg.pet_init), cfg.seed + 101);
    opt.mode_cycle = {Mode::ctpet};  // input-level fusion trains on paired volumes
    opt.probe_mode = Mode::ctpet;
    TrainStats stats = train_segmentation(model, cases, opt, log);
    result.steps_run = stats.steps_run;
    result.final_loss = stats.final_loss;

    Checkpoint full = to_checkpoint(model);
    save_checkpoint(out_path(cfg, artifact::kEarly), full);
    write_text(out_path(cfg, artifact::kParamReport), param_report(ledger_of(model)));
    result.artifacts["checkpoint"] = out_path(cfg, artifact::kEarly).string();
    extras["hashes"] = group_hashes(full);
    extras["trainable_fraction"] = ledger_of(model).trainable_fraction();
  } else {  // Method::late
    SegmentationModel<float> member = build_model<float>(cfg.geometry, cfg.seed + 303, ModelKind::uni_pet);
    opt.mode_cycle = {Mode::pet};
    opt.probe_mode = Mode::pet;
    TrainStats stats = train_segmentation(member, cases, opt, log);
    result.steps_run = stats.steps_run;
    result.final_loss = stats.final_loss;

    Checkpoint full = to_checkpoint(member);
    save_checkpoint(out_path(cfg, artifact::kPetMember), full);
    write_text(out_path(cfg, artifact::kParamReport), param_report(late_fusion_ledger(cfg.geometry)));
    result.artifacts["checkpoint"] = out_path(cfg, artifact::kPetMember).string();
    extras["hashes"] = group_hashes(full);
    extras["trainable_fraction"] = late_fusion_ledger(cfg.geometry).trainable_fraction();
    extras["w_ct"] = cfg.late_w_ct;
  }

  write_train_log(out_path(cfg, artifact::kTrainLog), log);
  result.artifacts["param_report"] = out_path(cfg, artifact::kParamReport).string();
  result.artifacts["train_log"] = out_path(cfg, artifact::kTrainLog).string();
  extras["method"] = method_name(cfg.method);
  extras["train_label"] = "ctpet";
  write_run_record(cfg, result, extras);
  return result;
}

RunResult run_continual(const RunConfig& cfg) {
  cfg.validate();
  ensure_out_dir(cfg);
  if (cfg.method != Method::pemma_lora && cfg.method != Method::pemma_dora)
    throw ConfigError("continual: only the low-rank adapted model supports scoped fine-tuning");
  CenterManifest man = load_manifest(cfg);
  require_artifact(cfg, artifact::kAdapted, "run the adapt stage first");
  Checkpoint adapted_ckpt = load_checkpoint(out_path(cfg, artifact::kAdapted));
  SegmentationModel<float> model = model_from_checkpoint<float>(adapted_ckpt);
  require_geometry_match(cfg.geometry, model.geo);
  if (!model.multimodal() || !model.adapted())
    throw ConfigError("continual: the checkpoint lacks the multimodal adaptation");

  // Scope the trainable set; the backbone stays frozen either way.
  for (auto& p : named_params(model)) {
    const bool in_scope =
        p.group == ParamGroup::peft ||
        (cfg.scope == TrainScope::wide &&
         (p.group == ParamGroup::pe_pet || p.group == ParamGroup::sk_pet ||
          p.group == ParamGroup::adapter));
    p.tensor->requires_grad = in_scope;
  }

  std::vector<CaseSample> cases =
      load_split_cases(man, Split::continual, cfg.continual_center, true);
  model.ct_inference = CtInference::joint;

  TrainOptions opt;
  opt.lr = cfg.resolved_lr();
  opt.steps = cfg.resolved_steps();
  opt.patience = cfg.patience;
  opt.weight_decay = cfg.weight_decay;
  opt.fg_weight = cfg.fg_weight;
  opt.augment = cfg.augment;
  opt.mode_cycle = cfg.continual_modes;
  opt.probe_mode = cfg.continual_modes.front();
  opt.seed = cfg.seed;

  std::vector<LogRow> log;
  TrainStats stats = train_segmentation(model, cases, opt, log);

  Checkpoint full = to_checkpoint(model);
  if (checkpoint_group_hash(full, ParamGroup::base) !=
      checkpoint_group_hash(adapted_ckpt, ParamGroup::base))
    throw std::logic_error("internal error: frozen backbone changed during continual fine-tuning");
  if (cfg.scope == TrainScope::peft_only)
    for (ParamGroup g : {ParamGroup::pe_pet, ParamGroup::sk_pet, ParamGroup::adapter})
      if (checkpoint_group_hash(full, g) != checkpoint_group_hash(adapted_ckpt, g))
        throw std::logic_error("internal error: out-of-scope parameters changed during continual fine-tuning");

  RunResult result;
  result.stage = cfg.stage;
  result.out_dir = cfg.out_dir;
  result.steps_run = stats.steps_run;
  result.final_loss = stats.final_loss;

  save_checkpoint(out_path(cfg, artifact::kContinual), full);
  save_checkpoint(out_path(cfg, artifact::kContinualDelta), delta_checkpoint(full));
  write_train_log(out_path(cfg, artifact::kTrainLog), log);
  result.artifacts["checkpoint"] = out_path(cfg, artifact::kContinual).string();
  result.artifacts["delta"] = out_path(cfg, artifact::kContinualDelta).string();
  result.artifacts["train_log"] = out_path(cfg, artifact::kTrainLog).string();

  std::string modes_label;
  for (Mode m : cfg.continual_modes)
    modes_label += (modes_label.empty() ? "" : "+") + std::string(mode_name(m));
  write_run_record(cfg, result,
                   {{"hashes_before", group_hashes(adapted_ckpt)},
                    {"hashes", group_hashes(full)},
                    {"method", method_name(cfg.method)},
                    {"scope", scope_name(cfg.scope)},
                    {"train_label", "ctpet_continual"},
                    {"continual_modes", modes_label}});
  return result;
}

namespace {

struct EvalTarget {
  std::string label;                    // checkpoint file name (or "late ensemble")
  std::string train_label;              // modalities the weights were trained with
  SegmentationModel<float>* primary = nullptr;
  SegmentationModel<float>* pet_member = nullptr;  // late fusion only
  double w_ct = 0.5;
};

DiceRow evaluate_case_late(const EvalTarget& target, const CaseSample& c, Mode mode) {
  std::vector<double> probs;
  const int classes = target.primary->geo.classes;
  if (mode == Mode::ct) {
    probs = predict_probabilities(*target.primary, &c.ct, nullptr, Mode::ct);
  } else if (mode == Mode::pet) {
    probs = predict_probabilities(*target.pet_member, nullptr, &c.pet, Mode::pet);
  } else {
    Tensor<double> pc({static_cast<int>(c.mask.data.size()), classes});
    Tensor<double> pp = pc;
    pc.data = predict_probabilities(*target.primary, &c.ct, nullptr, Mode::ct);
    pp.data = predict_probabilities(*target.pet_member, nullptr, &c.pet, Mode::pet);
    probs = late_fusion_combine(pc, pp, target.w_ct).data;
  }
  std::vector<uint8_t> pred = argmax_labels(probs, classes);
  DiceRow row;
  row.center = c.center;
  row.mode = mode;
  row.tumor = dice_score(pred, c.mask.data, 1);
  row.lymph = dice_score(pred, c.mask.data, 2);
  row.average = 0.5 * (row.tumor + row.lymph);
  return row;
}

}  // namespace

RunResult run_eval(const RunConfig& cfg) {
  cfg.validate();
  ensure_out_dir(cfg);
  CenterManifest man = load_manifest(cfg);

  SegmentationModel<float> primary;
  SegmentationModel<float> pet_member;
  EvalTarget target;
  target.w_ct = cfg.late_w_ct;

  if (cfg.method == Method::late) {
    require_artifact(cfg, artifact::kBase, "the blend needs the single-channel member; run pretrain first");
    require_artifact(cfg, artifact::kPetMember, "run adapt --method late first");
    primary = load_model<float>(out_path(cfg, artifact::kBase).string());
    pet_member = load_model<float>(out_path(cfg, artifact::kPetMember).string());
    require_geometry_match(pet_member.geo, primary.geo);
    target.label = "late ensemble";
    target.train_label = "ctpet";
    target.pet_member = &pet_member;
  } else {
    std::vector<const char*> order;
    if (cfg.method == Method::early)
      order = {artifact::kEarly, artifact::kBase};
    else
      order = {artifact::kContinual, artifact::kAdapted, artifact::kBase};
    const char* found = nullptr;
    for (const char* name : order)
      if (fs::exists(out_path(cfg, name))) {
        found = name;
        break;
      }
    if (!found)
      throw ConfigError("eval: no checkpoint in '" + cfg.out_dir + "'; run pretrain first");
    primary = load_model<float>(out_path(cfg, found).string());
    target.label = found;
    target.train_label = std::string(found) == artifact::kBase ? "ct"
                         : std::string(found) == artifact::kContinual ? "ctpet_continual"
                                                                      : "ctpet";
    // Input-level fusion cannot see a lone modality without explicit filling.
    if (primary.kind == ModelKind::early_fusion) primary.allow_zero_fill = true;
  }
  primary.ct_inference = cfg.ct_inference;
  require_geometry_match(cfg.geometry, primary.geo);
  target.primary = &primary;

  // Held-out cases from every center that reserves them.
  std::vector<CaseSample> cases;
  std::vector<std::string> centers;
  for (const CenterSpec& c : man.centers) {
    if (c.holdout <= 0) continue;
    centers.push_back(c.name);
    for (CaseSample& cs : generate_eval_cases(c)) {
      preprocess_intensities(cs);
      cases.push_back(std::move(cs));
    }
  }
  if (cases.empty()) throw DataError("eval: manifest reserves no held-out cases");

  std::vector<DiceRow> rows;
  for (const CaseSample& c : cases)
    for (Mode mode : cfg.eval_modes)
      rows.push_back(target.pet_member ? evaluate_case_late(target, c, mode)
                                       : evaluate_case(*target.primary, c, mode));

  // Per-center, per-mode means.
  const std::string run = run_name(cfg.out_dir);
  std::ostringstream csv;
  csv << "run,center,mode,class,metric,value\n";
  for (const std::string& center : centers)
    for (Mode mode : cfg.eval_modes) {
      double t = 0, l = 0, a = 0;
      int n = 0;
      for (const DiceRow& r : rows)
        if (r.center == center && r.mode == mode) {
          t += r.tumor;
          l += r.lymph;
          a += r.average;
          ++n;
        }
      if (n == 0) continue;
      csv << run << ',' << center << ',' << mode_name(mode) << ",tumor,dice," << fmt(t / n) << '\n';
      csv << run << ',' << center << ',' << mode_name(mode) << ",lymph,dice," << fmt(l / n) << '\n';
      csv << run << ',' << center << ',' << mode_name(mode) << ",average,dice," << fmt(a / n) << '\n';
    }

  std::ostringstream summary;
  summary << "run: " << run << '\n';
  summary << "checkpoint: " << target.label << '\n';
  summary << "centers:";
  for (const std::string& c : centers) summary << ' ' << c;
  summary << '\n';
  summary << "cases: " << cases.size() << '\n';
  for (Mode mode : cfg.eval_modes) {
    double t = 0, l = 0, a = 0;
    int n = 0;
    for (const DiceRow& r : rows)
      if (r.mode == mode) {
        t += r.tumor;
        l += r.lymph;
        a += r.average;
        ++n;
      }
    summary << "mode " << mode_name(mode) << ": tumor " << fmt(t / n) << " lymph " << fmt(l / n)
            << " average " << fmt(a / n) << '\n';
  }

  RunResult result;
  result.stage = cfg.stage;
  result.out_dir = cfg.out_dir;
  write_text(out_path(cfg, artifact::kMetrics), csv.str());
  write_text(out_path(cfg, artifact::kSummary), summary.str());
  result.artifacts["metrics"] = out_path(cfg, artifact::kMetrics).string();
  result.artifacts["summary"] = out_path(cfg, artifact::kSummary).string();

  write_run_record(cfg, result,
                   {{"checkpoint", target.label},
                    {"method", method_name(cfg.method)},
                    {"train_label", target.train_label},
                    {"trainable_fraction_text", fraction_text(out_path(cfg, artifact::kParamReport))},
                    {"cases", cases.size()}});
  return result;
}

namespace {

struct PrognosisSetting {
  std::string name;
  bool use_pet = false;
  bool use_ehr = false;
};

std::vector<double> pooled_features(SegmentationModel<float>& model, const CaseSample& c,
                                    bool use_pet) {
  Tape<float> tape;
  TapeBinder<float> bind(tape);
  const Mode mode = use_pet ? Mode::ctpet : Mode::ct;
  Id pooled = pooled_embedding(tape, bind, model, &c.ct, use_pet ? &c.pet : nullptr, mode);
  const Tensor<float>& row = tape.val(pooled);
  std::vector<double> out(row.data.begin(), row.data.end());
  return out;
}

}  // namespace

RunResult run_prognosis(const RunConfig& cfg) {
  cfg.validate();
  ensure_out_dir(cfg);
  if (cfg.method != Method::pemma_lora && cfg.method != Method::pemma_dora)
    throw ConfigError("prognosis: survival scoring runs on the low-rank adapted model");
  CenterManifest man = load_manifest(cfg);
  require_artifact(cfg, artifact::kAdapted, "run the adapt stage first");
  SegmentationModel<float> model = load_model<float>(out_path(cfg, artifact::kAdapted).string());
  require_geometry_match(cfg.geometry, model.geo);
  if (!model.multimodal())
    throw ConfigError("prognosis: the checkpoint lacks the PET pathway");
  model.ct_inference = CtInference::native;  // the CT-only setting scores the plain backbone path

  std::vector<CaseSample> train_cases = load_split_cases(man, Split::adapt, "", true);
  std::vector<CaseSample> eval_cases = load_split_cases(man, Split::adapt, "", false);

  auto embed_all = [&](const std::vector<CaseSample>& cs, bool use_pet) {
    std::vector<std::vector<double>> out;
    out.reserve(cs.size());
    for (const CaseSample& c : cs) out.push_back(pooled_features(model, c, use_pet));
    return out;
  };
  // The backbone is fixed here, so image features are computed once per case.
  std::vector<std::vector<double>> train_ct = embed_all(train_cases, false);
  std::vector<std::vector<double>> train_pp = embed_all(train_cases, true);
  std::vector<std::vector<double>> eval_ct = embed_all(eval_cases, false);
  std::vector<std::vector<double>> eval_pp = embed_all(eval_cases, true);

  std::vector<double> train_times, eval_times;
  std::vector<uint8_t> eval_events;
  for (const CaseSample& c : train_cases) train_times.push_back(c.survival.time);
  for (const CaseSample& c : eval_cases) {
    eval_times.push_back(c.survival.time);
    eval_events.push_back(c.survival.event ? 1 : 0);
  }
  TimeBins bins = discretize_times(train_times, cfg.prognosis_bins);
  std::vector<SurvivalTarget> train_targets;
  for (size_t i = 0; i < train_cases.size(); ++i)
    train_targets.push_back({bins.bins[i], train_cases[i].survival.event});
  std::vector<int> eval_bins;
  for (double t : eval_times) eval_bins.push_back(bin_of(bins.edges, t));

  long long pairs = 0;
  for (size_t i = 0; i < eval_cases.size(); ++i)
    for (size_t j = 0; j < eval_cases.size(); ++j)
      if (eval_events[i] && eval_times[i] < eval_times[j]) ++pairs;

  const std::vector<PrognosisSetting> settings = {
      {"ct", false, false}, {"ctpet", true, false}, {"ctpet_ehr", true, true}};

  const std::string run = run_name(cfg.out_dir);
  std::ostringstream csv, report;
  csv << "run,setting,cindex,comparable_pairs\n";
  json scores = json::object();

  for (size_t si = 0; si < settings.size(); ++si) {
    const PrognosisSetting& s = settings[si];
    auto feature_row = [&](const std::vector<double>& pooled, const CaseSample& c) {
      std::vector<double> f = pooled;
      if (s.use_ehr) {
        std::vector<double> ehr = build_ehr_features(c.ehr);
        f.insert(f.end(), ehr.begin(), ehr.end());
      }
      return f;
    };
    auto matrix_of = [&](const std::vector<CaseSample>& cs,
                         const std::vector<std::vector<double>>& pooled) {
      std::vector<std::vector<double>> rows;
      for (size_t i = 0; i < cs.size(); ++i) rows.push_back(feature_row(pooled[i], cs[i]));
      return rows;
    };
    std::vector<std::vector<double>> train_rows =
        matrix_of(train_cases, s.use_pet ? train_pp : train_ct);
    std::vector<std::vector<double>> eval_rows =
        matrix_of(eval_cases, s.use_pet ? eval_pp : eval_ct);
    const int in = static_cast<int>(train_rows.front().size());

    PrognosisHead<float> head = build_prognosis_head<float>(in, cfg.prognosis_hidden,
                                                            cfg.prognosis_bins, cfg.seed + 400 + si);
    std::vector<Tensor<float>*> params = {&head.w1, &head.b1, &head.w2, &head.b2};
    AdamWConfig ocfg;
    ocfg.lr0 = cfg.resolved_lr();
    ocfg.total_steps = cfg.resolved_prognosis_steps();
    ocfg.weight_decay = cfg.weight_decay;
    AdamW<float> optim(params, ocfg);

    Tensor<float> feats({static_cast<int>(train_rows.size()), in});
    for (size_t i = 0; i < train_rows.size(); ++i)
      for (int j = 0; j < in; ++j) feats.at(static_cast<int>(i), j) = static_cast<float>(train_rows[i][j]);

    for (int step = 0; step < ocfg.total_steps; ++step) {
      Tape<float> tape;
      TapeBinder<float> bind(tape);
      Id pmf = prognosis_forward(tape, bind, head, tape.constant(feats));
      Id loss = deephit_loss(tape, pmf, train_targets, static_cast<float>(cfg.deephit_eta),
                             static_cast<float>(cfg.deephit_sigma));
      const double lv = static_cast<double>(tape.val(loss).data[0]);
      if (!std::isfinite(lv))
        throw NumericError("prognosis: non-finite loss at step " + std::to_string(step));
      tape.backward(loss);
      optim.step();
    }

    // Survival curve per held-out case from the predicted mass function.
    std::vector<std::vector<double>> surv;
    for (const std::vector<double>& row : eval_rows) {
      Tensor<float> f({1, in});
      for (int j = 0; j < in; ++j) f.at(0, j) = static_cast<float>(row[j]);
      Tape<float> tape;
      TapeBinder<float> bind(tape);
      Id pmf = prognosis_forward(tape, bind, head, tape.constant(f));
      const Tensor<float>& p = tape.val(pmf);
      std::vector<double> s_row(static_cast<size_t>(cfg.prognosis_bins));
      double cum = 0.0;
      for (int k = 0; k < cfg.prognosis_bins; ++k) {
        cum += static_cast<double>(p.at(0, k));
        s_row[static_cast<size_t>(k)] = 1.0 - cum;
      }
      surv.push_back(std::move(s_row));
    }
    const double cindex = antolini_cindex(surv, eval_bins, eval_times, eval_events);
    csv << run << ',' << s.name << ',' << fmt(cindex) << ',' << pairs << '\n';
    report << "setting " << s.name << ": cindex " << fmt(cindex) << " comparable_pairs " << pairs
           << '\n';
    scores[s.name] = cindex;
  }

  RunResult result;
  result.stage = cfg.stage;
  result.out_dir = cfg.out_dir;
  write_text(out_path(cfg, artifact::kPrognosis), csv.str());
  write_text(out_path(cfg, artifact::kPrognosisReport), report.str());
  result.artifacts["prognosis"] = out_path(cfg, artifact::kPrognosis).string();
  result.artifacts["report"] = out_path(cfg, artifact::kPrognosisReport).string();

  write_run_record(cfg, result,
                   {{"cindex", scores},
                    {"comparable_pairs", pairs},
                    {"train_cases", train_cases.size()},
                    {"eval_cases", eval_cases.size()}});
  return result;
}

namespace {

struct ReportCell {
  std::map<std::string, double> by_class;  // class -> mean dice over centers
  std::string fraction;                    // verbatim parameter-report text, may be empty
  std::string source;                      // first run dir that produced the cell
};

}  // namespace

RunResult run_report(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw ConfigError("config: output directory is required");
  const fs::path root(cfg.out_dir);
  if (!fs::exists(root)) throw ConfigError("report: output directory does not exist");

  // Every directory holding an evaluation record is one run.
  std::vector<fs::path> run_dirs;
  if (fs::exists(root / "run_eval.json")) run_dirs.push_back(root);
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file() && entry.path().filename() == "run_eval.json" &&
        entry.path().parent_path() != root)
      run_dirs.push_back(entry.path().parent_path());
  std::sort(run_dirs.begin(), run_dirs.end());
  if (run_dirs.empty()) throw DataError("report: no evaluation runs under '" + cfg.out_dir + "'");

  // (method, train, infer) -> per-class values.
  std::map<std::tuple<std::string, std::string, std::string>, ReportCell> table;

  for (const fs::path& dir : run_dirs) {
    json rec;
    try {
      rec = json::parse(read_text(dir / "run_eval.json"));
    } catch (const json::exception& e) {
      throw DataError("report: malformed record in '" + dir.string() + "': " + e.what());
    }
    const std::string method = rec.value("method", std::string("unknown"));
    const std::string train = rec.value("train_label", std::string("unknown"));
    const std::string fraction = rec.value("trainable_fraction_text", std::string());

    const fs::path metrics = dir / artifact::kMetrics;
    if (!fs::exists(metrics))
      throw DataError("report: '" + dir.string() + "' has a record but no metrics table");
    std::istringstream in(read_text(metrics));
    std::string line;
    if (!std::getline(in, line) || line != "run,center,mode,class,metric,value")
      throw DataError("report: unexpected metrics header in '" + metrics.string() + "'");

    // mode -> class -> per-center values.
    std::map<std::string, std::map<std::string, std::vector<double>>> acc;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cols;
      std::istringstream ls(line);
      std::string col;
      while (std::getline(ls, col, ',')) cols.push_back(col);
      if (cols.size() != 6) throw DataError("report: malformed metrics row '" + line + "'");
      if (cols[4] != "dice") continue;
      try {
        acc[cols[2]][cols[3]].push_back(std::stod(cols[5]));
      } catch (const std::exception&) {
        throw DataError("report: non-numeric value in row '" + line + "'");
      }
    }

    for (const auto& [mode, classes] : acc) {
      const auto key = std::make_tuple(method, train, mode);
      ReportCell cell;
      cell.fraction = fraction;
      cell.source = dir.string();
      for (const auto& [cls, values] : classes) {
        double sum = 0;
        for (double v : values) sum += v;
        cell.by_class[cls] = sum / static_cast<double>(values.size());
      }
      auto [it, inserted] = table.emplace(key, cell);
      if (!inserted) {
        const ReportCell& prior = it->second;
        const bool same = prior.by_class == cell.by_class && prior.fraction == cell.fraction;
        if (!same)
          throw DataError("report: conflicting duplicate for method=" + method + " train=" + train +
                          " mode=" + mode + " between '" + prior.source + "' and '" + dir.string() +
                          "'");
      }
    }
  }

  std::ostringstream csv;
  csv << "method,train,infer,tumor,lymph,average,trainable_fraction\n";
  auto cell_text = [](const ReportCell& cell, const char* cls) {
    auto it = cell.by_class.find(cls);
    return it == cell.by_class.end() ? std::string("NA") : fmt(it->second);
  };
  for (const auto& [key, cell] : table) {
    csv << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ','
        << cell_text(cell, "tumor") << ',' << cell_text(cell, "lymph") << ','
        << cell_text(cell, "average") << ','
        << (cell.fraction.empty() ? std::string("NA") : cell.fraction) << '\n';
  }

  RunResult result;
  result.stage = Stage::report;
  result.out_dir = cfg.out_dir;
  write_text(root / artifact::kReport, csv.str());
  result.artifacts["report"] = (root / artifact::kReport).string();

  RunConfig snapshot = cfg;
  snapshot.stage = Stage::report;
  write_run_record(snapshot, result, {{"runs", run_dirs.size()}});
  return result;
}

RunResult run_stage(const RunConfig& cfg) {
  switch (cfg.stage) {
    case Stage::pretrain: return run_pretrain(cfg);
    case Stage::adapt: return run_adapt(cfg);
    case Stage::continual: return run_continual(cfg);
    case Stage::eval: return run_eval(cfg);
    case Stage::prognosis: return run_prognosis(cfg);
    default: return run_report(cfg);
  }
}

}  // namespace pemma
