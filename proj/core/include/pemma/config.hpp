// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pemma/backbone.hpp"
#include "pemma/modality.hpp"

namespace pemma {

enum class Stage : int { pretrain = 0, adapt = 1, continual = 2, eval = 3, prognosis = 4, report = 5 };
enum class Method : int { pemma_lora = 0, pemma_dora = 1, early = 2, late = 3 };
enum class TrainScope : int { peft_only = 0, wide = 1 };

const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);
const char* method_name(Method m);
Method parse_method(const std::string& m);
const char* scope_name(TrainScope s);
TrainScope parse_scope(const std::string& s);
const char* ct_inference_name(CtInference c);
CtInference parse_ct_inference(const std::string& s);

// One experiment run. Loaded from a versioned JSON file; command-line flags
// may override seed, output directory, method, eval modes, and scope.
struct RunConfig {
  Stage stage = Stage::pretrain;
  std::string manifest_path;
  std::string out_dir;
  uint64_t seed = 1;

  ModelGeometry geometry;  // desk-scale defaults

  // Low-rank adaptation settings; `method` picks the update family or one of
  // the fusion baselines.
  Method method = Method::pemma_lora;
  int rank = 8;
  double alpha = 16.0;
  std::vector<AttnTarget> targets = {AttnTarget::q, AttnTarget::v};
  DoraForm dora_form = DoraForm::canonical;

  // Training loop.
  double lr = 0.0;  // 0 => stage default (pretrain 1e-3, adapt/continual 1e-4)
  int steps = 0;    // 0 => stage default
  int patience = 20;
  bool augment = false;
  double weight_decay = 1e-5;
  double fg_weight = 16.0;  // cross-entropy upweight for the lesion classes
  ModalityDropout dropout;  // adapt-stage modality schedule
  std::string pet_init = "random";

  // Evaluation.
  std::vector<Mode> eval_modes = {Mode::ct, Mode::pet, Mode::ctpet};
  CtInference ct_inference = CtInference::native;

  // Continual fine-tuning.
  TrainScope scope = TrainScope::peft_only;
  std::vector<Mode> continual_modes = {Mode::ct};
  std::string continual_center;  // empty => every continual-split center

  // Late fusion.
  double late_w_ct = 0.5;

  // Prognosis head.
  int prognosis_hidden = 32;
  int prognosis_bins = 20;
  int prognosis_steps = 0;  // 0 => default
  double deephit_eta = 0.1;
  double deephit_sigma = 0.1;

  double resolved_lr() const;
  int resolved_steps() const;
  int resolved_prognosis_steps() const { return prognosis_steps > 0 ? prognosis_steps : 400; }

  AdaptationConfig adaptation() const;
  void validate() const;
};

// Strict parser: unknown keys, wrong types, and unsupported schema versions
// are configuration errors. See docs/run_config.md.
RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config(const std::filesystem::path& path);

// Round-trip snapshot used to make run directories self-describing.
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace pemma
