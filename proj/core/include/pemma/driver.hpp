// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pemma/backbone.hpp"
#include "pemma/checkpoint.hpp"
#include "pemma/config.hpp"
#include "pemma/manifest.hpp"

namespace pemma {

// Fixed artifact names inside a run directory. Every stage reads its inputs
// and writes its outputs under the configured `out` directory, so a single
// directory carries one pipeline (pretrain -> adapt -> continual -> eval ...).
namespace artifact {
inline constexpr const char* kBase = "base.ckpt";
inline constexpr const char* kAdapted = "adapted.ckpt";
inline constexpr const char* kDelta = "delta.ckpt";
inline constexpr const char* kEarly = "early.ckpt";
inline constexpr const char* kPetMember = "pet.ckpt";
inline constexpr const char* kContinual = "continual.ckpt";
inline constexpr const char* kContinualDelta = "continual_delta.ckpt";
inline constexpr const char* kParamReport = "param_report.txt";
inline constexpr const char* kTrainLog = "train_log.csv";
inline constexpr const char* kMetrics = "metrics.csv";
inline constexpr const char* kSummary = "summary.txt";
inline constexpr const char* kPrognosis = "prognosis.csv";
inline constexpr const char* kPrognosisReport = "prognosis_report.txt";
inline constexpr const char* kReport = "report.csv";
}  // namespace artifact

struct RunResult {
  Stage stage = Stage::pretrain;
  std::string out_dir;
  int steps_run = 0;
  double final_loss = 0.0;
  std::map<std::string, std::string> artifacts;  // label -> absolute path
};

// Checkpoint split/merge for the adapted model. The delta carries the model
// descriptor plus every non-backbone entry; applying it onto the backbone
// snapshot it was cut from rebuilds the full checkpoint byte for byte.
Checkpoint delta_checkpoint(const Checkpoint& full);
Checkpoint apply_delta(const Checkpoint& base, const Checkpoint& delta);

// Full-volume class probabilities, row-major (voxel-index x classes). Volumes
// larger than the model grid are covered with tail-aligned tiles; overlapping
// predictions are averaged.
std::vector<double> predict_probabilities(SegmentationModel<float>& model, const Volume* ct,
                                          const Volume* pet, Mode mode);
std::vector<uint8_t> argmax_labels(const std::vector<double>& probs, int classes);
std::vector<uint8_t> predict_labels(SegmentationModel<float>& model, const Volume* ct,
                                    const Volume* pet, Mode mode);

struct DiceRow {
  std::string center;
  Mode mode = Mode::ct;
  double tumor = 0.0;
  double lymph = 0.0;
  double average = 0.0;
};

// Segment one case in one mode and score both foreground classes.
DiceRow evaluate_case(SegmentationModel<float>& model, const CaseSample& c, Mode mode);

RunResult run_pretrain(const RunConfig& cfg);
RunResult run_adapt(const RunConfig& cfg);
RunResult run_continual(const RunConfig& cfg);
RunResult run_eval(const RunConfig& cfg);
RunResult run_prognosis(const RunConfig& cfg);
RunResult run_report(const RunConfig& cfg);

// Dispatch on cfg.stage.
RunResult run_stage(const RunConfig& cfg);

}  // namespace pemma
