// SPDX-License-Identifier: Apache-2.0
#include "pemma/ehr.hpp"

#include <cmath>
#include <sstream>

#include "pemma/errors.hpp"

namespace pemma {

namespace {

bool parse_flag(const std::string& key, const std::string& value) {
  if (value == "yes" || value == "true" || value == "1" || value == "positive") return true;
  if (value == "no" || value == "false" || value == "0" || value == "negative") return false;
  throw DataError("ehr: bad value '" + value + "' for field '" + key + "'");
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const int v = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw DataError("ehr: bad value '" + value + "' for field '" + key + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw DataError("ehr: bad value '" + value + "' for field '" + key + "'");
  }
}

// Render a weight like "84 kg" (integer when whole, one decimal otherwise).
std::string format_weight(double kg) {
  std::ostringstream os;
  if (kg == std::floor(kg)) {
    os << static_cast<long long>(kg);
  } else {
    os.setf(std::ios::fixed);
    os.precision(1);
    os << kg;
  }
  return os.str();
}

}  // namespace

void set_ehr_field(EhrRecord& record, const std::string& key, const std::string& value) {
  if (key == "gender") {
    if (value != "male" && value != "female")
      throw DataError("ehr: bad value '" + value + "' for field 'gender'");
    record.gender = value;
  } else if (key == "age") {
    record.age = parse_int(key, value);
  } else if (key == "weight") {
    record.weight_kg = parse_double(key, value);
  } else if (key == "tobacco") {
    record.tobacco = parse_flag(key, value);
  } else if (key == "alcohol") {
    record.alcohol = parse_flag(key, value);
  } else if (key == "hpv") {
    record.hpv = parse_flag(key, value);
  } else if (key == "surgery") {
    record.surgery = parse_flag(key, value);
  } else if (key == "chemotherapy") {
    record.chemotherapy = parse_flag(key, value);
  } else if (key == "performance") {
    const int v = parse_int(key, value);
    if (v < 0 || v > 4) throw DataError("ehr: performance status must be 0..4");
    record.performance = v;
  } else {
    throw DataError("ehr: unknown field name '" + key + "'");
  }
}

std::string ehr_sentence(const EhrRecord& r) {
  std::ostringstream os;
  os << "This is a ";
  if (r.gender) os << *r.gender << " ";
  os << "head-and-neck cancer patient";
  if (r.age) os << ", " << *r.age << " years old";
  if (r.weight_kg) os << ", weighing " << format_weight(*r.weight_kg) << " kg";
  if (r.tobacco) os << (*r.tobacco ? ", tobacco user" : ", non-tobacco user");
  if (r.alcohol) os << (*r.alcohol ? ", alcohol user" : ", non-alcohol user");
  if (r.hpv) os << (*r.hpv ? ", HPV positive" : ", HPV negative");
  if (r.performance) os << ", performance status " << *r.performance;
  if (r.surgery) os << (*r.surgery ? ", who underwent surgery" : ", who did not undergo surgery");
  if (r.chemotherapy)
    os << (*r.chemotherapy ? ", and received chemotherapy" : ", and did not receive chemotherapy");
  os << ".";
  return os.str();
}

namespace {

const std::vector<std::string> kFeatureNames = {
    "gender.present",      "gender.male",       "gender.female",     "age.present",
    "age.z",               "weight.present",    "weight.z",          "tobacco.present",
    "tobacco.yes",         "tobacco.no",        "alcohol.present",   "alcohol.yes",
    "alcohol.no",          "hpv.present",       "hpv.positive",      "hpv.negative",
    "surgery.present",     "surgery.yes",       "surgery.no",        "chemo.present",
    "chemo.yes",           "chemo.no",          "performance.present", "performance.0",
    "performance.1",       "performance.2",     "performance.3",     "performance.4",
};

}  // namespace

const std::vector<std::string>& ehr_feature_names() { return kFeatureNames; }

int ehr_feature_dim() { return static_cast<int>(kFeatureNames.size()); }

std::vector<double> build_ehr_features(const EhrRecord& r) {
  std::vector<double> f(kFeatureNames.size(), 0.0);
  if (r.gender) {
    f[0] = 1.0;
    f[*r.gender == "male" ? 1 : 2] = 1.0;
  }
  if (r.age) {
    f[3] = 1.0;
    f[4] = (static_cast<double>(*r.age) - kEhrAgeMean) / kEhrAgeStd;
  }
  if (r.weight_kg) {
    f[5] = 1.0;
    f[6] = (*r.weight_kg - kEhrWeightMean) / kEhrWeightStd;
  }
  auto flag = [&f](const std::optional<bool>& v, int base) {
    if (!v) return;
    f[base] = 1.0;
    f[*v ? base + 1 : base + 2] = 1.0;
  };
  flag(r.tobacco, 7);
  flag(r.alcohol, 10);
  flag(r.hpv, 13);
  flag(r.surgery, 16);
  flag(r.chemotherapy, 19);
  if (r.performance) {
    if (*r.performance < 0 || *r.performance > 4)
      throw DataError("ehr: performance status must be 0..4");
    f[22] = 1.0;
    f[23 + *r.performance] = 1.0;
  }
  return f;
}

}  // namespace pemma
