// SPDX-License-Identifier: Apache-2.0
#include "pemma/manifest.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pemma/errors.hpp"

namespace pemma {

const char* split_name(Split s) {
  switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::adapt: return "adapt";
    default: return "continual";
  }
}

Split parse_split(const std::string& s) {
  if (s == "pretrain") return Split::pretrain;
  if (s == "adapt") return Split::adapt;
  if (s == "continual") return Split::continual;
  throw DataError("manifest: unknown split '" + s + "'");
}

const CenterSpec* CenterManifest::find(const std::string& name) const {
  for (const auto& c : centers)
    if (c.name == name) return &c;
  return nullptr;
}

std::vector<const CenterSpec*> CenterManifest::by_split(Split s) const {
  std::vector<const CenterSpec*> out;
  for (const auto& c : centers)
    if (c.split == s) out.push_back(&c);
  return out;
}

void CenterManifest::validate() const {
  if (version != 1) throw DataError("manifest: unsupported version " + std::to_string(version));
  if (centers.empty()) throw DataError("manifest: no centers defined");
  for (const auto& c : centers) {
    if (c.name.empty()) throw DataError("manifest: center with empty name");
    if (c.cases < 1) throw DataError("manifest: center " + c.name + " has no cases");
    if (c.holdout < 0 || c.holdout >= c.cases)
      throw DataError("manifest: center " + c.name + " holdout must be in [0, cases)");
    c.phantom.validate();
  }
  for (size_t i = 0; i < centers.size(); ++i)
    for (size_t j = i + 1; j < centers.size(); ++j) {
      if (centers[i].name == centers[j].name)
        throw DataError("manifest: duplicate center '" + centers[i].name + "'");
      // Case seeds are seed_base + index; overlapping ranges would alias
      // cases across splits.
      const uint64_t a0 = centers[i].seed_base, a1 = a0 + centers[i].cases;
      const uint64_t b0 = centers[j].seed_base, b1 = b0 + centers[j].cases;
      if (a0 < b1 && b0 < a1)
        throw DataError("manifest: seed ranges of centers '" + centers[i].name + "' and '" +
                        centers[j].name + "' overlap");
    }
}

namespace {

struct Line {
  int number;
  std::string key, value;
};

[[noreturn]] void fail(int line, const std::string& msg) {
  throw DataError("manifest: line " + std::to_string(line) + ": " + msg);
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long to_int(const Line& l) {
  try {
    size_t used = 0;
    const long long v = std::stoll(l.value, &used);
    if (used != l.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    fail(l.number, "expected an integer for '" + l.key + "', got '" + l.value + "'");
  }
}

double to_double(const Line& l) {
  try {
    size_t used = 0;
    const double v = std::stod(l.value, &used);
    if (used != l.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    fail(l.number, "expected a number for '" + l.key + "', got '" + l.value + "'");
  }
}

// Applies one key to a center section; returns false for unknown keys.
bool apply_center_key(CenterSpec& c, const Line& l) {
  PhantomSpec& p = c.phantom;
  if (l.key == "split") c.split = parse_split(l.value);
  else if (l.key == "cases") c.cases = static_cast<int>(to_int(l));
  else if (l.key == "seed_base") c.seed_base = static_cast<uint64_t>(to_int(l));
  else if (l.key == "holdout") c.holdout = static_cast<int>(to_int(l));
  else if (l.key == "side") p.side = static_cast<int>(to_int(l));
  else if (l.key == "tumor_count_min") p.tumor_count_min = static_cast<int>(to_int(l));
  else if (l.key == "tumor_count_max") p.tumor_count_max = static_cast<int>(to_int(l));
  else if (l.key == "node_count_min") p.node_count_min = static_cast<int>(to_int(l));
  else if (l.key == "node_count_max") p.node_count_max = static_cast<int>(to_int(l));
  else if (l.key == "tumor_radius_min") p.tumor_radius_min = to_double(l);
  else if (l.key == "tumor_radius_max") p.tumor_radius_max = to_double(l);
  else if (l.key == "node_radius_min") p.node_radius_min = to_double(l);
  else if (l.key == "node_radius_max") p.node_radius_max = to_double(l);
  else if (l.key == "ct_background") p.ct_background = to_double(l);
  else if (l.key == "ct_texture") p.ct_texture = to_double(l);
  else if (l.key == "ct_noise") p.ct_noise = to_double(l);
  else if (l.key == "ct_tumor_contrast") p.ct_tumor_contrast = to_double(l);
  else if (l.key == "ct_node_contrast") p.ct_node_contrast = to_double(l);
  else if (l.key == "pet_background") p.pet_background = to_double(l);
  else if (l.key == "pet_noise") p.pet_noise = to_double(l);
  else if (l.key == "pet_tumor_gain") p.pet_tumor_gain = to_double(l);
  else if (l.key == "pet_node_gain") p.pet_node_gain = to_double(l);
  else if (l.key == "intensity_offset") p.intensity_offset = to_double(l);
  else if (l.key == "noise_scale") p.noise_scale = to_double(l);
  else if (l.key == "lesion_size_bias") p.lesion_size_bias = to_double(l);
  else if (l.key == "censor_fraction") p.censor_fraction = to_double(l);
  else if (l.key == "survival_scale") p.survival_scale = to_double(l);
  else if (l.key == "survival_noise") p.survival_noise = to_double(l);
  else if (l.key == "risk_burden") p.risk_burden = to_double(l);
  else if (l.key == "risk_hpv") p.risk_hpv = to_double(l);
  else if (l.key == "ehr_missing_rate") p.ehr_missing_rate = to_double(l);
  else return false;
  return true;
}

}  // namespace

CenterManifest parse_manifest_text(const std::string& text) {
  CenterManifest m;
  CenterSpec* current = nullptr;
  bool saw_split = false;

  std::istringstream in(text);
  std::string raw;
  int number = 0;
  auto finish_center = [&]() {
    if (current && !saw_split) fail(number, "center '" + current->name + "' is missing 'split'");
  };
  while (std::getline(in, raw)) {
    ++number;
    std::string line = trim(raw);
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(number, "unterminated section header");
      const std::string inner = trim(line.substr(1, line.size() - 2));
      if (inner.rfind("center ", 0) != 0) fail(number, "expected '[center NAME]'");
      finish_center();
      CenterSpec spec;
      spec.name = trim(inner.substr(7));
      if (spec.name.empty()) fail(number, "center name is empty");
      spec.holdout = -1;  // filled with default after parsing
      m.centers.push_back(std::move(spec));
      current = &m.centers.back();
      saw_split = false;
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) fail(number, "expected 'key = value'");
    Line l{number, trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (l.key.empty() || l.value.empty()) fail(number, "expected 'key = value'");
    if (!current) {
      if (l.key == "version") m.version = static_cast<int>(to_int(l));
      else fail(number, "key '" + l.key + "' outside a center section");
      continue;
    }
    if (l.key == "split") saw_split = true;
    if (!apply_center_key(*current, l)) fail(number, "unknown key '" + l.key + "'");
  }
  finish_center();
  for (auto& c : m.centers)
    if (c.holdout < 0) c.holdout = std::max(1, c.cases / 4);
  m.validate();
  return m;
}

CenterManifest parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest_text(buf.str());
}

std::vector<CaseSample> generate_center_cases(const CenterSpec& center) {
  std::vector<CaseSample> out;
  out.reserve(static_cast<size_t>(center.cases));
  for (int i = 0; i < center.cases; ++i) {
    CaseSample c = generate_phantom(center.seed_base + static_cast<uint64_t>(i), center.phantom,
                                    center.name);
    char idx[8];
    std::snprintf(idx, sizeof(idx), "%04d", i);
    c.id = center.name + "-" + idx;
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<CaseSample> generate_train_cases(const CenterSpec& center) {
  auto all = generate_center_cases(center);
  all.resize(static_cast<size_t>(center.train_count()));
  return all;
}

std::vector<CaseSample> generate_eval_cases(const CenterSpec& center) {
  auto all = generate_center_cases(center);
  return {all.begin() + center.train_count(), all.end()};
}

}  // namespace pemma
