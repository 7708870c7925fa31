#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "carotidseg/mask.hpp"
#include "carotidseg/tensor.hpp"

namespace carotidseg {

struct ClassMetrics {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double dice = 0.0, iou = 0.0, precision = 0.0, recall = 0.0;
};

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<ClassMetrics> per_class;
  ClassMetrics macro;  // unweighted mean over classes (confusion counts summed)
  std::int64_t n_slices = 0;
};

// Metrics from confusion counts. Empty-class convention: a class absent from
// both pred and gt scores 1 on all four metrics; absent from exactly one
// scores 0.
ClassMetrics metrics_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn);

MetricsReport segmentation_metrics(const SegmentationMask& pred, const SegmentationMask& gt);

// Pooled-confusion aggregation over many slices.
class MetricsAccumulator {
 public:
  void add(const SegmentationMask& pred, const SegmentationMask& gt);
  MetricsReport report() const;
  // per-slice macro dice values (for histograms / per-slice means)
  const std::vector<double>& slice_macro_dice() const { return slice_dice_; }

 private:
  std::vector<std::string> class_names_;
  std::vector<ClassMetrics> counts_;
  std::int64_t n_slices_ = 0;
  std::vector<double> slice_dice_;
};

struct DetectionRecord {
  std::string slice_id;
  bool left_detected = false, right_detected = false;
  std::string failure_reason;

  bool fully_detected() const { return left_detected && right_detected; }
};

struct DetectionSummary {
  double rate = 0.0;
  std::int64_t n_failed = 0, n_total = 0;
  std::vector<std::string> failures;  // slice ids
};

// A slice counts as failed when either side failed.
DetectionSummary detection_rate(const std::vector<DetectionRecord>& records);

// Side-wise detection criterion: the predicted center must lie inside the
// ground-truth foreground bounding box of that side, and the roi_size crop
// centered there must contain every ground-truth foreground pixel of the side.
// gt_foreground is (H,W) binary; side = columns [0, W/2) or [W/2, W).
bool side_detected(const Tensor& gt_foreground, bool left_side, bool has_center, double center_row,
                   double center_col, std::int64_t roi_size = 64);

// Cohen's kappa over two equal-length rating lists; p_e == 1 yields 1.
double cohens_kappa(const std::vector<int>& ratings_a, const std::vector<int>& ratings_b,
                    const std::vector<int>& categories);

struct HistoryRecord {
  int epoch = 0;
  std::int64_t step = 0;
  double train_loss = 0.0, sup_loss = 0.0, con_loss = 0.0, prior_loss = 0.0;
  double val_dice = 0.0;
  double lr = 0.0, lambda_t = 0.0, tau_t = 0.0;
};

// Writes metrics.csv (Dice & IoU & Precision & Recall layout), loss_curves.svg
// and dice_hist.svg; output bytes are deterministic functions of the inputs.
void emit_report(const std::vector<HistoryRecord>& history, const MetricsReport& metrics,
                 const std::vector<double>& slice_dice, const std::filesystem::path& out_dir);

// One metrics row in the four-column table layout.
std::string metrics_csv_row(const std::string& label, const ClassMetrics& m);

}  // namespace carotidseg
