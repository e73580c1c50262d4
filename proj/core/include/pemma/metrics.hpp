// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

namespace pemma {

// Overlap score for one label of two integer masks. Both masks empty for the
// label -> 1.0; exactly one empty -> 0.0.
double dice_score(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
                  int label);

struct TimeBins {
  std::vector<double> edges;  // n_bins - 1 interior edges
  std::vector<int> bins;      // bin index per input time
  int n_bins = 0;
};

// Empirical-quantile binning. Edge k sits at sorted[ceil(k*n/n_bins) - 1];
// a time equal to an edge falls into the lower bin.
TimeBins discretize_times(const std::vector<double>& times, int n_bins);
int bin_of(const std::vector<double>& edges, double time);

// Time-dependent concordance over survival curves. surv[i][k] is subject i's
// predicted probability of surviving beyond bin k. Pairs (i, j) with
// event i and time_i < time_j are comparable; concordant when
// surv[i][bin_i] < surv[j][bin_i]; prediction ties count one half.
double antolini_cindex(const std::vector<std::vector<double>>& surv,
                       const std::vector<int>& bins, const std::vector<double>& times,
                       const std::vector<uint8_t>& events);

// Cosine decay from lr0 to exactly zero over total steps.
double cosine_lr(double lr0, int step, int total_steps);

}  // namespace pemma
