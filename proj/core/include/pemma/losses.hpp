// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "pemma/autodiff.hpp"
#include "pemma/errors.hpp"

namespace pemma {

// Equal-weight mean of soft Dice loss over the foreground labels and
// voxel-wise cross-entropy. `logits` is (V x C); labels holds one class id
// per voxel. Class weights apply to the cross-entropy term; pass an empty
// vector for uniform weights.
template <typename T>
typename Tape<T>::Id dice_ce_loss(Tape<T>& tape, typename Tape<T>::Id logits,
                                  const std::vector<uint8_t>& labels,
                                  const std::vector<double>& class_weights = {},
                                  T dice_eps = T(1e-5)) {
  const int v = tape.val(logits).rows();
  const int c = tape.val(logits).cols();
  if (static_cast<int>(labels.size()) != v)
    throw ConfigError("dice_ce_loss: label count does not match logit rows");
  for (uint8_t l : labels)
    if (l >= c) throw ConfigError("dice_ce_loss: label id out of range");
  if (!class_weights.empty() && static_cast<int>(class_weights.size()) != c)
    throw ConfigError("dice_ce_loss: class weight count mismatch");

  // cross-entropy from stable log-probabilities
  std::vector<int> rows(v), cols(v);
  for (int i = 0; i < v; ++i) {
    rows[i] = i;
    cols[i] = labels[i];
  }
  auto lse = tape.logsumexp_rows(logits);                    // (V x 1)
  auto picked = tape.gather(logits, rows, cols);             // (V x 1)
  auto nll = tape.sub(lse, picked);                          // -log p[label]
  typename Tape<T>::Id ce;
  if (class_weights.empty()) {
    ce = tape.mean(nll);
  } else {
    Tensor<T> w({v, 1});
    double total = 0.0;
    for (int i = 0; i < v; ++i) {
      w.data[i] = static_cast<T>(class_weights[labels[i]]);
      total += class_weights[labels[i]];
    }
    if (total <= 0.0) throw ConfigError("dice_ce_loss: class weights sum to zero");
    ce = tape.scale(tape.sum(tape.mul(nll, tape.constant(w))), T(1.0 / total));
  }

  // soft Dice over foreground labels
  auto probs = tape.softmax(logits, 1);
  typename Tape<T>::Id dice_sum = tape.constant(Tensor<T>({1}, {T(0)}));
  int fg = 0;
  for (int cls = 1; cls < c; ++cls) {
    Tensor<T> onehot({v, 1});
    T gt_total = T(0);
    for (int i = 0; i < v; ++i) {
      onehot.data[i] = labels[i] == cls ? T(1) : T(0);
      gt_total += onehot.data[i];
    }
    auto p = tape.slice_cols(probs, cls, cls + 1);
    auto inter = tape.sum(tape.mul(p, tape.constant(onehot)));
    auto denom = tape.add_scalar(tape.sum(p), gt_total);
    auto dice = tape.div(tape.add_scalar(tape.scale(inter, T(2)), dice_eps),
                         tape.add_scalar(denom, dice_eps));
    dice_sum = tape.add(dice_sum, dice);
    ++fg;
  }
  if (fg == 0) throw ConfigError("dice_ce_loss: need at least one foreground class");
  auto dice_loss =
      tape.add_scalar(tape.scale(dice_sum, T(-1.0 / fg)), T(1));  // 1 - mean dice

  return tape.scale(tape.add(dice_loss, ce), T(0.5));
}

struct SurvivalTarget {
  int bin = 0;        // discrete time bin
  bool event = false;  // true when the event was observed (not censored)
};

// Discrete-time survival loss: negative log-likelihood plus an exponential
// pairwise ranking penalty on cumulative incidence. `pmf` is (S x K), one
// probability row per subject. Events contribute -log pmf[bin]; censored
// subjects contribute -log(mass above their bin), clamped at 1e-12.
// `clamped_rows`, when given, receives the number of censored rows that hit
// the clamp floor.
template <typename T>
typename Tape<T>::Id deephit_loss(Tape<T>& tape, typename Tape<T>::Id pmf,
                                  const std::vector<SurvivalTarget>& targets, T eta = T(0.1),
                                  T sigma = T(0.1), int* clamped_rows = nullptr) {
  const int s = tape.val(pmf).rows();
  const int k = tape.val(pmf).cols();
  if (static_cast<int>(targets.size()) != s)
    throw ConfigError("deephit_loss: target count does not match pmf rows");
  for (const auto& t : targets)
    if (t.bin < 0 || t.bin >= k) throw ConfigError("deephit_loss: bin out of range");

  // likelihood mass per subject: pmf at the event bin, or everything above
  // the censoring bin
  Tensor<T> mask({s, k});
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < k; ++j) {
      const bool hit = targets[i].event ? (j == targets[i].bin) : (j > targets[i].bin);
      mask.data[static_cast<size_t>(i) * k + j] = hit ? T(1) : T(0);
    }
  auto masses = tape.sum_rows(tape.mul(pmf, tape.constant(mask)));  // (S x 1)
  if (clamped_rows) {
    *clamped_rows = 0;
    for (int i = 0; i < s; ++i)
      if (tape.val(masses).data[i] < T(1e-12)) ++(*clamped_rows);
  }
  auto nll = tape.neg(tape.mean(tape.log(tape.clamp_min(masses, T(1e-12)))));

  // ranking penalty over comparable pairs (i observed event, earlier bin)
  std::vector<int> ri, rj, ci;
  for (int i = 0; i < s; ++i) {
    if (!targets[i].event) continue;
    for (int j = 0; j < s; ++j) {
      if (i == j || targets[i].bin >= targets[j].bin) continue;
      ri.push_back(i);
      rj.push_back(j);
      ci.push_back(targets[i].bin);
    }
  }
  if (ri.empty()) return nll;

  auto cif = tape.cumsum_rows(pmf);                // F(t) per bin
  auto fi = tape.gather(cif, ri, ci);              // F_i at t_i
  auto fj = tape.gather(cif, rj, ci);              // F_j at t_i
  auto rank = tape.mean(tape.exp(tape.scale(tape.sub(fi, fj), T(-1) / sigma)));
  return tape.add(nll, tape.scale(rank, eta));
}

}  // namespace pemma
