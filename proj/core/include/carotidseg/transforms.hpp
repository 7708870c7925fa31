#pragma once

#include <array>
#include <cstdint>

#include "carotidseg/rng.hpp"
#include "carotidseg/tensor.hpp"

namespace carotidseg {

// Geometric half of tau. Fully determines the output-space transform; the
// composition order is fixed as flip -> scale -> rotate -> perspective -> crop.
struct GeometricParams {
  bool flip_h = false;
  double rotation_deg = 0.0;
  double scale = 1.0;
  std::int64_t crop_dr = 0, crop_dc = 0;
  // Corner displacements as fractions of (W-1, H-1), order TL,TR,BL,BR;
  // each corner stores (dx, dy).
  std::array<double, 8> perspective{};

  bool is_identity() const;
};

// Photometric half of tau. dropout_seed also seeds the noise realization so a
// stored parameter set replays bit-identically.
struct PhotometricParams {
  double noise_std = 0.0;
  double sharpness = 1.0;
  double intensity_gamma = 1.0;
  std::uint64_t dropout_seed = 0;
};

struct PerturbationParams {
  GeometricParams gamma;
  PhotometricParams phi;
};

struct ParamRange {
  double lo = 0.0, hi = 0.0;
};

struct PerturbationPolicy {
  bool enable_flip = true;
  double flip_prob = 0.5;
  bool enable_rotation = true;
  ParamRange rotation_deg{-25.0, 25.0};
  bool enable_scale = true;
  ParamRange scale_weak{0.9, 1.1};
  ParamRange scale_strong{0.7, 1.3};
  double strong_scale_prob = 0.5;
  bool enable_crop = true;
  int max_crop_offset = 8;
  bool enable_perspective = true;
  double max_perspective_frac = 0.05;
  bool enable_noise = true;
  ParamRange noise_std{0.0, 0.1};
  bool enable_sharpness = true;
  ParamRange sharpness{0.5, 2.0};
  bool enable_intensity = true;
  ParamRange intensity_gamma{0.7, 1.5};

  void validate() const;  // throws when any range has lo > hi
  void disable_geometric();
  void disable_photometric();
};

PerturbationParams sample_perturbation(const PerturbationPolicy& policy, Rng& rng);

enum class Interp { bilinear, nearest };

// Warps every channel of a (C,H,W) tensor; out-of-support regions are 0.
Tensor apply_geometric(const Tensor& chw, const GeometricParams& gamma, Interp interp);

// Nearest-neighbour warp of a one-hot mask; out-of-support pixels become
// background (channel 0) so the result stays one-hot.
Tensor apply_geometric_mask(const Tensor& onehot_chw, const GeometricParams& gamma);

// Bilinear warp of a soft probability map followed by per-pixel
// renormalization to the simplex (out-of-support pixels stay all-zero).
Tensor transform_probability_map(const Tensor& probs_chw, const GeometricParams& gamma);

// Intensity pipeline sharpness -> gamma -> additive Gaussian noise -> clip to
// [0,1]. Operates on single (H,W) images; masks are never routed through here.
Tensor apply_photometric(const Tensor& image_hw, const PhotometricParams& phi);

// v^gamma: push an all-ones (C,H,W) tensor through the nearest-neighbour warp
// and threshold at exactly 1.
Tensor validity_mask(const GeometricParams& gamma, std::int64_t H, std::int64_t W, std::int64_t C);

}  // namespace carotidseg
