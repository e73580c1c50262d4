// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

namespace pemma {

// Clinical record with per-field presence; absent fields are omitted from the
// sentence and masked out of the feature vector (no imputation).
struct EhrRecord {
  std::optional<std::string> gender;  // "male" | "female"
  std::optional<int> age;
  std::optional<double> weight_kg;
  std::optional<bool> tobacco;
  std::optional<bool> alcohol;
  std::optional<bool> hpv;
  std::optional<bool> surgery;
  std::optional<bool> chemotherapy;
  std::optional<int> performance;  // ECOG-style 0..4
};

// Keyed setter for text ingestion; unknown field names are rejected.
void set_ehr_field(EhrRecord& record, const std::string& key, const std::string& value);

// One-sentence narrative; every present field contributes one clause.
std::string ehr_sentence(const EhrRecord& record);

// Fixed-width numeric encoding: one-hot per categorical plus an explicit
// present/absent mask bit per field; age and weight standardized.
std::vector<double> build_ehr_features(const EhrRecord& record);
const std::vector<std::string>& ehr_feature_names();
int ehr_feature_dim();

// Standardization constants for the two continuous fields.
inline constexpr double kEhrAgeMean = 60.0;
inline constexpr double kEhrAgeStd = 10.0;
inline constexpr double kEhrWeightMean = 80.0;
inline constexpr double kEhrWeightStd = 15.0;

}  // namespace pemma
