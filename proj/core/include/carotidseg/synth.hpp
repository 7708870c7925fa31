#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "carotidseg/manifest.hpp"
#include "carotidseg/mask.hpp"

namespace carotidseg {

// Configuration of the synthetic "phantom neck" dataset: two annular vessels
// per slice (left/right), optional eccentric plaque thickening, optional
// bright distractor blobs, and per-sequence intensity profiles.
struct PhantomSpec {
  int n_patients = 4;
  int slices_per_patient = 4;
  std::int64_t height = 256, width = 256;
  double plaque_probability = 0.6;   // per vessel
  double distractor_rate = 0.5;      // expected blobs per slice
  double labeled_fraction = 0.5;     // near the 1:1 labeled/unlabeled ratio
  int n_sequences = 5;
  std::vector<double> noise_std;     // per sequence; default 0.03 each
  ClassScheme class_scheme = ClassScheme::multiclass;
  std::uint64_t seed = 0;

  void validate() const;
  double noise_for(int seq) const;
};

// Writes volumes (.rvol) plus a manifest.json under out_dir and returns the
// loaded manifest. Fully reproducible from the seed: identical spec + out_dir
// contents are byte-identical across runs.
DatasetManifest generate_phantom(const PhantomSpec& spec, const std::filesystem::path& out_dir);

// Named stress cases for desk testing; deterministic.
struct PhantomCase {
  std::string name;
  std::string description;
  MultiSequenceSlice slice;  // always carries a ground-truth mask
};

std::vector<PhantomCase> phantom_case_catalog();

}  // namespace carotidseg
