#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "carotidseg/mask.hpp"

namespace carotidseg {

struct PatientEntry {
  std::string id;
  // sequence name -> volume path (relative paths resolved against the manifest directory)
  std::map<std::string, std::string> volumes;
  std::vector<int> labeled_slices;
  std::optional<std::string> mask;
};

struct DatasetManifest {
  std::vector<PatientEntry> patients;
  std::vector<std::string> sequence_names;
  ClassScheme class_scheme = ClassScheme::binary;
  std::filesystem::path base_dir;  // set on load; not serialized

  std::filesystem::path resolve(const std::string& rel) const;
  const PatientEntry& patient(const std::string& id) const;
};

// Default sequence naming, mirroring the five clinical MRI contrasts.
std::vector<std::string> default_sequence_names();

// Parses and validates a manifest. Structural violations raise a parse error
// naming the offending key path; referenced volume files must exist.
DatasetManifest load_manifest(const std::filesystem::path& path);

// Validation without touching the filesystem (used by save and tests).
void validate_manifest_structure(const DatasetManifest& m);

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// Patient-splitting helpers. Sub-entries sharing an id prefix before '/'
// (e.g. "p003/L", "p003/R") always land in the same split.
std::string split_group_of(const std::string& patient_id);

struct DatasetSplits {
  std::vector<std::string> train, val, test;  // patient ids
};

// fractions must sum to 1; defaults to the 80/10/10 localization split.
DatasetSplits split_patientwise(const DatasetManifest& m,
                                double train_frac, double val_frac, double test_frac,
                                std::uint64_t seed);

struct FoldSplit {
  std::vector<std::string> train, val;
};

std::vector<FoldSplit> split_kfold(const DatasetManifest& m, int k, std::uint64_t seed);

}  // namespace carotidseg
