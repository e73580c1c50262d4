// SPDX-License-Identifier: Apache-2.0
#include "pemma/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pemma/errors.hpp"

namespace pemma {

double dice_score(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
                  int label) {
  if (pred.size() != truth.size()) throw ConfigError("dice_score: mask size mismatch");
  size_t np = 0, nt = 0, inter = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == label;
    const bool t = truth[i] == label;
    np += p;
    nt += t;
    inter += p && t;
  }
  if (np == 0 && nt == 0) return 1.0;
  if (np == 0 || nt == 0) return 0.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

TimeBins discretize_times(const std::vector<double>& times, int n_bins) {
  if (n_bins < 2) throw ConfigError("discretize_times: need at least 2 bins");
  if (times.empty()) throw DataError("discretize_times: empty time list");
  std::vector<double> sorted = times;
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back())
    throw DataError("discretize_times: all times identical, bins would be degenerate");

  TimeBins out;
  out.n_bins = n_bins;
  out.edges.reserve(n_bins - 1);
  const long long n = static_cast<long long>(sorted.size());
  for (int k = 1; k < n_bins; ++k) {
    const long long idx = (static_cast<long long>(k) * n + n_bins - 1) / n_bins - 1;
    out.edges.push_back(sorted[static_cast<size_t>(idx)]);
  }
  out.bins.reserve(times.size());
  for (double t : times) out.bins.push_back(bin_of(out.edges, t));
  return out;
}

int bin_of(const std::vector<double>& edges, double time) {
  // number of edges strictly below `time`; ties land in the lower bin
  int b = 0;
  for (double e : edges)
    if (e < time) ++b;
  return b;
}

double antolini_cindex(const std::vector<std::vector<double>>& surv,
                       const std::vector<int>& bins, const std::vector<double>& times,
                       const std::vector<uint8_t>& events) {
  const size_t n = surv.size();
  if (bins.size() != n || times.size() != n || events.size() != n)
    throw ConfigError("antolini_cindex: input length mismatch");
  if (n < 2) throw DataError("antolini_cindex: need at least two subjects");
  const size_t k = surv.empty() ? 0 : surv[0].size();
  for (const auto& row : surv)
    if (row.size() != k) throw ConfigError("antolini_cindex: ragged survival matrix");
  for (int b : bins)
    if (b < 0 || static_cast<size_t>(b) >= k)
      throw ConfigError("antolini_cindex: bin index out of range");

  double concordant = 0.0;
  long long comparable = 0;
  for (size_t i = 0; i < n; ++i) {
    if (!events[i]) continue;
    for (size_t j = 0; j < n; ++j) {
      if (i == j || !(times[i] < times[j])) continue;
      ++comparable;
      const double si = surv[i][bins[i]];
      const double sj = surv[j][bins[i]];
      if (si < sj)
        concordant += 1.0;
      else if (si == sj)
        concordant += 0.5;
    }
  }
  if (comparable == 0) throw DataError("antolini_cindex: no comparable pairs");
  return concordant / static_cast<double>(comparable);
}

double cosine_lr(double lr0, int step, int total_steps) {
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step < 0) throw ConfigError("cosine_lr: negative step");
  if (step >= total_steps) return 0.0;
  const double x = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

}  // namespace pemma
