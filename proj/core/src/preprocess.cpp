#include "carotidseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace carotidseg {

SequenceStats compute_stats(const Volume& v) {
  SequenceStats s;
  s.mean = v.data.mean();
  double var = 0.0;
  for (std::int64_t i = 0; i < v.data.numel(); ++i) {
    double d = v.data[i] - s.mean;
    var += d * d;
  }
  var /= static_cast<double>(v.data.numel());
  s.stddev = std::sqrt(var);
  return s;
}

Volume standardize_volume(const Volume& v, const SequenceStats& stats) {
  Volume out = v;
  if (stats.stddev <= 0.0) return out;
  for (std::int64_t i = 0; i < out.data.numel(); ++i)
    out.data[i] = static_cast<float>((out.data[i] - stats.mean) / stats.stddev);
  return out;
}

Tensor minmax_normalize_slice(const Tensor& img) {
  Tensor out = img;
  float lo = img.min(), hi = img.max();
  if (hi <= lo) {
    out.fill(0.0f);
    return out;
  }
  float inv = 1.0f / (hi - lo);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = (out[i] - lo) * inv;
  return out;
}

Volume standardize_and_normalize(const Volume& v, const SequenceStats& stats) {
  Volume z = standardize_volume(v, stats);
  for (std::int64_t k = 0; k < z.depth(); ++k) z.set_slice(k, minmax_normalize_slice(z.slice(k)));
  return z;
}

Volume standardize_and_normalize(const Volume& v) {
  return standardize_and_normalize(v, compute_stats(v));
}

namespace {

Tensor crop_image(const Tensor& img, std::int64_t r0, std::int64_t c0, std::int64_t h, std::int64_t w,
                  float pad) {
  Tensor out({h, w}, pad);
  std::int64_t H = img.dim(0), W = img.dim(1);
  for (std::int64_t r = 0; r < h; ++r) {
    std::int64_t ir = r0 + r;
    if (ir < 0 || ir >= H) continue;
    for (std::int64_t c = 0; c < w; ++c) {
      std::int64_t ic = c0 + c;
      if (ic >= 0 && ic < W) out.at(r, c) = img.at(ir, ic);
    }
  }
  return out;
}

}  // namespace

MultiSequenceSlice extract_roi(const MultiSequenceSlice& slices,
                               std::pair<std::int64_t, std::int64_t> center,
                               std::pair<std::int64_t, std::int64_t> size) {
  slices.validate();
  std::int64_t H = slices.height(), W = slices.width();
  auto [cr, cc] = center;
  auto [h, w] = size;
  if (cr < 0 || cr >= H || cc < 0 || cc >= W)
    throw std::invalid_argument("extract_roi: center outside image");
  if (h <= 0 || w <= 0 || h > H || w > W)
    throw std::invalid_argument("extract_roi: size must be within image dimensions");
  std::int64_t r0 = cr - h / 2, c0 = cc - w / 2;

  MultiSequenceSlice out;
  out.patient_id = slices.patient_id;
  out.slice_index = slices.slice_index;
  for (const auto& img : slices.images) out.images.push_back(crop_image(img, r0, c0, h, w, 0.0f));
  if (slices.mask) {
    SegmentationMask m;
    m.classes = slices.mask->classes;
    std::int64_t C = slices.mask->n_classes();
    m.data = Tensor::zeros({C, h, w});
    for (std::int64_t c = 0; c < C; ++c) {
      Tensor ch({slices.mask->height(), slices.mask->width()});
      std::copy_n(slices.mask->data.data() + c * H * W, H * W, ch.data());
      // padding adds background (class 0) so the crop remains one-hot
      Tensor cropped = crop_image(ch, r0, c0, h, w, c == 0 ? 1.0f : 0.0f);
      std::copy_n(cropped.data(), h * w, m.data.data() + c * h * w);
    }
    out.mask = std::move(m);
  }
  return out;
}

MultiSequenceSlice shifted_bbox_augment(const MultiSequenceSlice& slices,
                                        std::pair<std::int64_t, std::int64_t> center,
                                        std::pair<std::int64_t, std::int64_t> size,
                                        std::int64_t max_shift, Rng& rng) {
  std::int64_t dr = max_shift > 0 ? rng.uniform_int(-max_shift, max_shift) : 0;
  std::int64_t dc = max_shift > 0 ? rng.uniform_int(-max_shift, max_shift) : 0;
  std::int64_t cr = std::clamp<std::int64_t>(center.first + dr, 0, slices.height() - 1);
  std::int64_t cc = std::clamp<std::int64_t>(center.second + dc, 0, slices.width() - 1);
  return extract_roi(slices, {cr, cc}, size);
}

Tensor paste_roi(const Tensor& image, const Tensor& roi,
                 std::pair<std::int64_t, std::int64_t> center) {
  Tensor out = image;
  std::int64_t r0 = center.first - roi.dim(0) / 2, c0 = center.second - roi.dim(1) / 2;
  for (std::int64_t r = 0; r < roi.dim(0); ++r) {
    std::int64_t ir = r0 + r;
    if (ir < 0 || ir >= image.dim(0)) continue;
    for (std::int64_t c = 0; c < roi.dim(1); ++c) {
      std::int64_t ic = c0 + c;
      if (ic >= 0 && ic < image.dim(1)) out.at(ir, ic) = roi.at(r, c);
    }
  }
  return out;
}

std::vector<MultiSequenceSlice> load_patient_slices(const DatasetManifest& m,
                                                    const std::string& patient_id, bool preprocess) {
  const PatientEntry& p = m.patient(patient_id);
  std::vector<Volume> vols;
  for (const auto& seq : m.sequence_names) {
    Volume v = load_volume(m.resolve(p.volumes.at(seq)));
    vols.push_back(preprocess ? standardize_and_normalize(v) : std::move(v));
  }
  std::optional<Volume> mask_vol;
  if (p.mask) mask_vol = load_volume(m.resolve(*p.mask));

  std::int64_t K = vols.at(0).depth();
  for (const auto& v : vols)
    if (v.depth() != K || v.height() != vols[0].height() || v.width() != vols[0].width())
      throw std::runtime_error("patient " + patient_id + ": sequence volumes disagree in shape");
  for (int s : p.labeled_slices)
    if (s >= K) throw std::runtime_error("patient " + patient_id + ": labeled slice index out of range");

  std::vector<MultiSequenceSlice> out;
  for (std::int64_t k = 0; k < K; ++k) {
    MultiSequenceSlice s;
    s.patient_id = patient_id;
    s.slice_index = static_cast<int>(k);
    for (const auto& v : vols) s.images.push_back(v.slice(k));
    bool labeled = std::find(p.labeled_slices.begin(), p.labeled_slices.end(), static_cast<int>(k)) !=
                   p.labeled_slices.end();
    if (labeled && mask_vol)
      s.mask = SegmentationMask::from_label_map(mask_vol->slice(k), m.class_scheme);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace carotidseg
