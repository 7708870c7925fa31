#pragma once

#include "carotidseg/manifest.hpp"
#include "carotidseg/mask.hpp"
#include "carotidseg/rng.hpp"
#include "carotidseg/volume_io.hpp"

namespace carotidseg {

struct SequenceStats {
  double mean = 0.0;
  double stddev = 0.0;
};

SequenceStats compute_stats(const Volume& v);

// z-standardization over the whole volume; skipped for constant volumes.
Volume standardize_volume(const Volume& v, const SequenceStats& stats);

// Per-slice min-max to [0,1]; a constant slice maps to all zeros.
Tensor minmax_normalize_slice(const Tensor& img);

// Standardize over the volume, then min-max each slice to [0,1].
Volume standardize_and_normalize(const Volume& v, const SequenceStats& stats);
Volume standardize_and_normalize(const Volume& v);  // stats from the volume itself

// Crops all sequences (and the mask, if present) to `size` around `center`.
// Out-of-bounds image pixels are zero-padded; mask padding is background.
// Throws if center lies outside the image.
MultiSequenceSlice extract_roi(const MultiSequenceSlice& slices,
                               std::pair<std::int64_t, std::int64_t> center,
                               std::pair<std::int64_t, std::int64_t> size = {64, 64});

// extract_roi with the center jittered uniformly in +-max_shift per axis.
MultiSequenceSlice shifted_bbox_augment(const MultiSequenceSlice& slices,
                                        std::pair<std::int64_t, std::int64_t> center,
                                        std::pair<std::int64_t, std::int64_t> size,
                                        std::int64_t max_shift, Rng& rng);

// Writes `roi` back into a copy of `image` at the same center (test aid for
// the crop/embed round-trip property).
Tensor paste_roi(const Tensor& image, const Tensor& roi,
                 std::pair<std::int64_t, std::int64_t> center);

// Loads every slice of a patient with all sequences (preprocessed when
// `preprocess` is set) and ground-truth masks attached to labeled slices.
std::vector<MultiSequenceSlice> load_patient_slices(const DatasetManifest& m,
                                                    const std::string& patient_id,
                                                    bool preprocess = true);

}  // namespace carotidseg
