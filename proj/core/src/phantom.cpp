// SPDX-License-Identifier: Apache-2.0
#include "pemma/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "pemma/errors.hpp"

namespace pemma {

void PhantomSpec::validate() const {
  if (side < 8) throw ConfigError("phantom: side must be at least 8");
  if (tumor_count_min < 0 || node_count_min < 0 || tumor_count_max < tumor_count_min ||
      node_count_max < node_count_min)
    throw ConfigError("phantom: bad lesion count range");
  if (tumor_radius_min <= 0 || node_radius_min <= 0 || tumor_radius_max < tumor_radius_min ||
      node_radius_max < node_radius_min)
    throw ConfigError("phantom: bad lesion radius range");
  const double rmax =
      std::max(tumor_radius_max, node_radius_max) * (1.0 + std::max(0.0, lesion_size_bias));
  if (2.0 * rmax + 2.0 >= side) throw ConfigError("phantom: lesions do not fit inside the volume");
  if (pet_tumor_gain <= 0 || pet_node_gain <= 0) throw ConfigError("phantom: gains must be positive");
  if (censor_fraction < 0 || censor_fraction > 1)
    throw ConfigError("phantom: censor fraction must lie in [0, 1]");
  if (noise_scale < 0 || ehr_missing_rate < 0 || ehr_missing_rate > 1)
    throw ConfigError("phantom: bad noise scale or missing rate");
  if (max_lesion_attempts < 1) throw ConfigError("phantom: need at least one placement attempt");
}

namespace {

struct Lesion {
  uint8_t cls;  // 1 tumor, 2 node
  double cx, cy, cz, r;
};

// Rasterise a ball into the mask; returns false when it would overlap a voxel
// already owned by the other class.
bool paint_lesion(LabelVolume& mask, const Lesion& l) {
  const int lo_x = std::max(0, static_cast<int>(std::floor(l.cx - l.r)));
  const int hi_x = std::min(mask.nx - 1, static_cast<int>(std::ceil(l.cx + l.r)));
  const int lo_y = std::max(0, static_cast<int>(std::floor(l.cy - l.r)));
  const int hi_y = std::min(mask.ny - 1, static_cast<int>(std::ceil(l.cy + l.r)));
  const int lo_z = std::max(0, static_cast<int>(std::floor(l.cz - l.r)));
  const int hi_z = std::min(mask.nz - 1, static_cast<int>(std::ceil(l.cz + l.r)));
  const double r2 = l.r * l.r;
  for (int z = lo_z; z <= hi_z; ++z)
    for (int y = lo_y; y <= hi_y; ++y)
      for (int x = lo_x; x <= hi_x; ++x) {
        const double dx = x - l.cx, dy = y - l.cy, dz = z - l.cz;
        if (dx * dx + dy * dy + dz * dz > r2) continue;
        const uint8_t cur = mask.at(x, y, z);
        if (cur != 0 && cur != l.cls) return false;
      }
  for (int z = lo_z; z <= hi_z; ++z)
    for (int y = lo_y; y <= hi_y; ++y)
      for (int x = lo_x; x <= hi_x; ++x) {
        const double dx = x - l.cx, dy = y - l.cy, dz = z - l.cz;
        if (dx * dx + dy * dy + dz * dz <= r2) mask.at(x, y, z) = l.cls;
      }
  return true;
}

Lesion draw_lesion(Rng& rng, const PhantomSpec& spec, uint8_t cls) {
  const double rmin = cls == 1 ? spec.tumor_radius_min : spec.node_radius_min;
  const double rmax = cls == 1 ? spec.tumor_radius_max : spec.node_radius_max;
  Lesion l;
  l.cls = cls;
  l.r = rng.uniform(rmin, rmax) * (1.0 + spec.lesion_size_bias);
  const double margin = l.r + 1.0;
  l.cx = rng.uniform(margin, spec.side - 1 - margin);
  l.cy = rng.uniform(margin, spec.side - 1 - margin);
  l.cz = rng.uniform(margin, spec.side - 1 - margin);
  return l;
}

EhrRecord draw_ehr(Rng& rng, const PhantomSpec& spec, bool& true_hpv) {
  EhrRecord r;
  r.gender = rng.bernoulli(0.5) ? "female" : "male";
  r.age = static_cast<int>(std::clamp(std::lround(rng.gaussian(60.0, 10.0)), 30l, 90l));
  r.weight_kg = static_cast<double>(std::lround(std::clamp(rng.gaussian(80.0, 15.0), 40.0, 140.0)));
  r.tobacco = rng.bernoulli(0.4);
  r.alcohol = rng.bernoulli(0.3);
  true_hpv = rng.bernoulli(0.5);
  r.hpv = true_hpv;
  r.surgery = rng.bernoulli(0.5);
  r.chemotherapy = rng.bernoulli(0.7);
  r.performance = static_cast<int>(rng.uniform_int(0, 4));
  // Field-level missingness; the drawn truth still shapes the survival draw.
  if (rng.bernoulli(spec.ehr_missing_rate)) r.gender.reset();
  if (rng.bernoulli(spec.ehr_missing_rate)) r.age.reset();
  if (rng.bernoulli(spec.ehr_missing_rate)) r.weight_kg.reset();
  if (rng.bernoulli(spec.ehr_missing_rate)) r.tobacco.reset();
  if (rng.bernoulli(spec.ehr_missing_rate)) r.alcohol.reset();
  if (rng.bernoulli(spec.ehr_missing_rate)) r.hpv.reset();
  if (rng.bernoulli(spec.ehr_missing_rate)) r.surgery.reset();
  if (rng.bernoulli(spec.ehr_missing_rate)) r.chemotherapy.reset();
  if (rng.bernoulli(spec.ehr_missing_rate)) r.performance.reset();
  return r;
}

}  // namespace

long long foreground_voxels(const LabelVolume& mask) {
  long long n = 0;
  for (uint8_t v : mask.data) n += (v != 0);
  return n;
}

CaseSample generate_phantom(uint64_t seed, const PhantomSpec& spec, const std::string& center) {
  spec.validate();
  Rng rng(seed);
  const int s = spec.side;

  CaseSample c;
  c.center = center;
  c.seed = seed;
  c.ct = Volume(s, s, s);
  c.pet = Volume(s, s, s);
  c.mask = LabelVolume(s, s, s);
  c.ct.spacing = c.pet.spacing = {spec.spacing_mm, spec.spacing_mm, spec.spacing_mm};
  c.ct.modality = "ct";
  c.pet.modality = "pet";

  // Low-frequency anatomical texture: a few random cosine waves.
  struct Wave {
    double fx, fy, fz, phase, amp;
  };
  std::vector<Wave> waves(3);
  for (auto& w : waves) {
    w.fx = rng.uniform_int(1, 2);
    w.fy = rng.uniform_int(1, 2);
    w.fz = rng.uniform_int(1, 2);
    w.phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    w.amp = spec.ct_texture / 3.0;
  }
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double t = spec.ct_background + spec.intensity_offset;
        for (const auto& w : waves)
          t += w.amp * std::cos(two_pi * (w.fx * x + w.fy * y + w.fz * z) / s + w.phase);
        c.ct.at(x, y, z) = static_cast<float>(t);
      }

  // Lesions: tumors first, then nodes; a node overlapping a tumor is resampled.
  const int n_tumor = static_cast<int>(rng.uniform_int(spec.tumor_count_min, spec.tumor_count_max));
  const int n_node = static_cast<int>(rng.uniform_int(spec.node_count_min, spec.node_count_max));
  std::vector<Lesion> placed;
  for (int i = 0; i < n_tumor + n_node; ++i) {
    const uint8_t cls = i < n_tumor ? 1 : 2;
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_lesion_attempts; ++attempt) {
      Lesion l = draw_lesion(rng, spec, cls);
      if (paint_lesion(c.mask, l)) {
        placed.push_back(l);
        ok = true;
        break;
      }
    }
    if (!ok)
      throw DataError("phantom: could not place a class-" + std::to_string(cls) +
                      " lesion without cross-class overlap (seed " + std::to_string(seed) + ")");
  }

  // Intensities: faint additive contrast on CT, strong hot spots on PET.
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const uint8_t m = c.mask.at(x, y, z);
        if (m == 1) c.ct.at(x, y, z) += static_cast<float>(spec.ct_tumor_contrast);
        if (m == 2) c.ct.at(x, y, z) += static_cast<float>(spec.ct_node_contrast);
        double p = spec.pet_background + std::fabs(rng.gaussian(0.0, spec.pet_noise * spec.noise_scale));
        if (m == 1) p += spec.pet_tumor_gain;
        if (m == 2) p += spec.pet_node_gain;
        c.pet.at(x, y, z) = static_cast<float>(p);
        c.ct.at(x, y, z) += static_cast<float>(rng.gaussian(0.0, spec.ct_noise * spec.noise_scale));
      }

  bool true_hpv = false;
  c.ehr = draw_ehr(rng, spec, true_hpv);

  const double burden =
      static_cast<double>(foreground_voxels(c.mask)) / static_cast<double>(c.mask.numel());
  const double risk = spec.risk_burden * burden + (true_hpv ? 0.0 : spec.risk_hpv);
  const double t_true =
      spec.survival_scale * std::exp(-risk + spec.survival_noise * rng.gaussian());
  if (rng.bernoulli(spec.censor_fraction)) {
    c.survival.event = false;
    c.survival.time = t_true * rng.uniform(0.05, 0.95);
  } else {
    c.survival.event = true;
    c.survival.time = t_true;
  }
  return c;
}

void preprocess_intensities(CaseSample& c) {
  if (c.preprocessed) return;
  for (auto& v : c.ct.data) {
    const float clipped = std::clamp(v, -200.0f, 250.0f);
    v = (clipped + 200.0f) / 450.0f;
  }
  double sum = 0.0;
  size_t nz = 0;
  for (float v : c.pet.data)
    if (v != 0.0f) {
      sum += v;
      ++nz;
    }
  if (nz == 0) {
    c.pet_all_zero = true;
  } else {
    const double mean = sum / static_cast<double>(nz);
    double var = 0.0;
    for (float v : c.pet.data)
      if (v != 0.0f) var += (v - mean) * (v - mean);
    var /= static_cast<double>(nz);
    const double sd = std::sqrt(var);
    for (auto& v : c.pet.data)
      if (v != 0.0f) v = static_cast<float>(sd > 1e-12 ? (v - mean) / sd : v - mean);
  }
  c.preprocessed = true;
}

std::vector<PatchSample> sample_patches(const CaseSample& c, int size, int pos, int neg, int count,
                                        Rng& rng) {
  if (size <= 0 || size > c.ct.nx || size > c.ct.ny || size > c.ct.nz)
    throw ConfigError("sample_patches: patch size must fit inside the volume");
  if (pos < 0 || neg < 0 || pos + neg == 0)
    throw ConfigError("sample_patches: ratio must have a positive total");
  if (count < 0) throw ConfigError("sample_patches: negative count");

  const long long npos_ll =
      std::llround(static_cast<double>(count) * pos / static_cast<double>(pos + neg));
  const int npos = static_cast<int>(npos_ll);
  const int nneg = count - npos;

  std::vector<size_t> fg;
  for (size_t i = 0; i < c.mask.data.size(); ++i)
    if (c.mask.data[i] != 0) fg.push_back(i);
  if (npos > 0 && fg.empty())
    throw DataError("sample_patches: ratio requires foreground patches but the mask is empty");

  auto origin_around = [&](int coord, int extent) {
    const int lo = std::max(0, coord - size + 1);
    const int hi = std::min(extent - size, coord);
    return static_cast<int>(rng.uniform_int(lo, hi));
  };
  auto contains_fg = [&](int x0, int y0, int z0) {
    for (int z = z0; z < z0 + size; ++z)
      for (int y = y0; y < y0 + size; ++y)
        for (int x = x0; x < x0 + size; ++x)
          if (c.mask.at(x, y, z) != 0) return true;
    return false;
  };
  auto cut = [&](int x0, int y0, int z0, bool is_fg) {
    PatchSample p;
    p.x0 = x0;
    p.y0 = y0;
    p.z0 = z0;
    p.ct = crop_volume(c.ct, x0, y0, z0, size);
    p.pet = crop_volume(c.pet, x0, y0, z0, size);
    p.mask = crop_labels(c.mask, x0, y0, z0, size);
    p.foreground = is_fg;
    return p;
  };

  std::vector<PatchSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < npos; ++i) {
    const size_t v = fg[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(fg.size()) - 1))];
    const int x = static_cast<int>(v % c.mask.nx);
    const int y = static_cast<int>((v / c.mask.nx) % c.mask.ny);
    const int z = static_cast<int>(v / (static_cast<size_t>(c.mask.nx) * c.mask.ny));
    out.push_back(cut(origin_around(x, c.ct.nx), origin_around(y, c.ct.ny),
                      origin_around(z, c.ct.nz), true));
  }
  for (int i = 0; i < nneg; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 200; ++attempt) {
      const int x0 = static_cast<int>(rng.uniform_int(0, c.ct.nx - size));
      const int y0 = static_cast<int>(rng.uniform_int(0, c.ct.ny - size));
      const int z0 = static_cast<int>(rng.uniform_int(0, c.ct.nz - size));
      if (!contains_fg(x0, y0, z0)) {
        out.push_back(cut(x0, y0, z0, false));
        placed = true;
        break;
      }
    }
    if (!placed)
      throw DataError("sample_patches: could not find a background-only patch");
  }
  return out;
}

void augment_case(CaseSample& c, Rng& rng) {
  for (int axis = 0; axis < 3; ++axis)
    if (rng.bernoulli(0.5)) {
      c.ct = flip_volume(c.ct, axis);
      c.pet = flip_volume(c.pet, axis);
      c.mask = flip_labels(c.mask, axis);
    }
  const int k = static_cast<int>(rng.uniform_int(0, 3));
  if (k != 0) {
    c.ct = rotate90_z(c.ct, k);
    c.pet = rotate90_z(c.pet, k);
    c.mask = rotate90_z_labels(c.mask, k);
  }
}

}  // namespace pemma
