#pragma once

#include <string>
#include <vector>

#include "carotidseg/autograd.hpp"
#include "carotidseg/tensor.hpp"

namespace carotidseg {

struct PriorConfig {
  int max_row_diff = 20;
  int min_components_per_side = 1;
  int max_components_per_side = 2;
  double binarize_threshold = 0.5;

  void validate() const;
};

struct Component {
  std::int64_t area = 0;
  double centroid_row = 0.0, centroid_col = 0.0;
};

// 8-connectivity labeling; components sorted by area descending.
std::vector<Component> connected_components(const Tensor& binary_hw);

struct PriorReport {
  int left_components = 0, right_components = 0;
  std::vector<std::pair<double, double>> left_centers, right_centers;  // (row,col)
  double symmetry_deviation = 0.0;  // |delta row| of area-weighted side centers; -1 if undefined
  std::vector<std::string> violations;

  bool compliant() const { return violations.empty(); }
};

// Binarizes at cfg.binarize_threshold, splits at the vertical midline, counts
// components per side and measures the row deviation of the area-weighted
// side centers.
PriorReport evaluate_prior(const Tensor& prob_map_hw, const PriorConfig& cfg);

// Differentiable symmetry hinge (soft probability-mass centroid rows) plus a
// piecewise-constant component-count penalty. Zero iff the constraints hold.
// prob_map is (N,1,H,W).
ag::Var prior_loss(const ag::Var& prob_map, const PriorConfig& cfg);

struct SideDetection {
  bool detected = false;
  double center_row = 0.0, center_col = 0.0;  // area-weighted over kept components
  std::vector<Component> kept;
};

struct PriorFilterResult {
  Tensor mask;  // filtered binary (H,W)
  SideDetection left, right;
};

// Keeps at most the two largest components per side and drops components whose
// removal restores the symmetry constraint (largest total area wins; ties
// prefer more components, then smaller deviation). Idempotent.
PriorFilterResult prior_filter(const Tensor& prob_map_hw, const PriorConfig& cfg);

}  // namespace carotidseg
