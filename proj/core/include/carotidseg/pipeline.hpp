#pragma once

#include <filesystem>

#include "carotidseg/eval.hpp"
#include "carotidseg/manifest.hpp"
#include "carotidseg/prior.hpp"
#include "carotidseg/trainer.hpp"

namespace carotidseg {

struct RoiExtractOptions {
  int roi_size = 64;
  bool use_prior_filter = true;
  PriorConfig prior;
};

struct RoiExtractResult {
  std::filesystem::path roi_manifest_path;
  std::vector<DetectionRecord> records;  // one per slice with ground truth
  std::int64_t n_rois = 0;
  std::int64_t n_slices = 0;
};

// Runs localization inference over every slice of the listed patients,
// extracts per-side ROI crops at the (prior-filtered) centers and writes an
// ROI dataset: entries "<patient>/L" and "<patient>/R" so patient-wise splits
// keep sides together. Slices with a failed side are logged and skipped.
RoiExtractResult extract_roi_dataset(Model& loc_model, const DatasetManifest& src,
                                     const std::vector<std::string>& patient_ids,
                                     const RoiExtractOptions& opt,
                                     const std::filesystem::path& out_dir);

// Per-side centers for one probability map: prior-filtered or raw
// (area-weighted centroid of all foreground per side).
struct SliceCenters {
  bool left_ok = false, right_ok = false;
  double left_row = 0, left_col = 0, right_row = 0, right_col = 0;
};
SliceCenters slice_centers(const Tensor& prob_hw, const PriorConfig& prior, bool use_filter);

struct EvalResult {
  MetricsReport report;
  std::vector<double> slice_dice;
};

// Inference + pooled metrics over the labeled slices of the listed patients.
EvalResult evaluate_model(Model& model, const DatasetManifest& manifest,
                          const std::vector<std::string>& patient_ids);

// Writes predicted label-map volumes (one per patient) plus predictions.json.
void predict_to_dir(Model& model, const DatasetManifest& manifest,
                    const std::vector<std::string>& patient_ids,
                    const std::filesystem::path& out_dir);

}  // namespace carotidseg
