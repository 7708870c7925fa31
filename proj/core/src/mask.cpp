#include "carotidseg/mask.hpp"

#include <cmath>
#include <stdexcept>

namespace carotidseg {

std::string to_string(ClassScheme s) { return s == ClassScheme::binary ? "binary" : "multiclass"; }

ClassScheme class_scheme_from_string(const std::string& s) {
  if (s == "binary") return ClassScheme::binary;
  if (s == "multiclass") return ClassScheme::multiclass;
  throw std::invalid_argument("unknown class_scheme '" + s + "' (binary|multiclass)");
}

int class_count(ClassScheme s) { return s == ClassScheme::binary ? 2 : 3; }

std::vector<std::string> class_names(ClassScheme s) {
  if (s == ClassScheme::binary) return {"background", "foreground"};
  return {"background", "vessel_wall", "plaque"};
}

bool SegmentationMask::is_one_hot() const {
  if (data.rank() != 3) return false;
  std::int64_t C = data.dim(0), H = data.dim(1), W = data.dim(2);
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w) {
      float sum = 0.0f;
      for (std::int64_t c = 0; c < C; ++c) {
        float v = data.at(c, h, w);
        if (v != 0.0f && v != 1.0f) return false;
        sum += v;
      }
      if (sum != 1.0f) return false;
    }
  return true;
}

void SegmentationMask::validate() const {
  if (!is_one_hot()) throw std::runtime_error("SegmentationMask: one-hot invariant violated");
  if (static_cast<std::int64_t>(classes.size()) != data.dim(0))
    throw std::runtime_error("SegmentationMask: class name count mismatch");
}

SegmentationMask SegmentationMask::from_label_map(const Tensor& labels, ClassScheme scheme) {
  if (labels.rank() != 2) throw std::invalid_argument("label map must be (H,W)");
  int C = class_count(scheme);
  SegmentationMask m;
  m.classes = class_names(scheme);
  m.data = Tensor::zeros({C, labels.dim(0), labels.dim(1)});
  for (std::int64_t h = 0; h < labels.dim(0); ++h)
    for (std::int64_t w = 0; w < labels.dim(1); ++w) {
      int code = static_cast<int>(std::lround(labels.at(h, w)));
      if (code < 0 || code >= C)
        throw std::runtime_error("label code " + std::to_string(code) + " out of range for " +
                                 to_string(scheme) + " scheme");
      m.data.at(code, h, w) = 1.0f;
    }
  return m;
}

Tensor SegmentationMask::to_label_map() const {
  Tensor out({data.dim(1), data.dim(2)});
  for (std::int64_t h = 0; h < data.dim(1); ++h)
    for (std::int64_t w = 0; w < data.dim(2); ++w)
      for (std::int64_t c = 0; c < data.dim(0); ++c)
        if (data.at(c, h, w) == 1.0f) {
          out.at(h, w) = static_cast<float>(c);
          break;
        }
  return out;
}

Tensor SegmentationMask::foreground() const {
  Tensor out({data.dim(1), data.dim(2)});
  for (std::int64_t h = 0; h < data.dim(1); ++h)
    for (std::int64_t w = 0; w < data.dim(2); ++w)
      out.at(h, w) = data.at(0, h, w) == 1.0f ? 0.0f : 1.0f;
  return out;
}

SegmentationMask SegmentationMask::to_binary() const {
  SegmentationMask m;
  m.classes = class_names(ClassScheme::binary);
  m.data = Tensor::zeros({2, data.dim(1), data.dim(2)});
  Tensor fg = foreground();
  for (std::int64_t h = 0; h < data.dim(1); ++h)
    for (std::int64_t w = 0; w < data.dim(2); ++w) {
      m.data.at(fg.at(h, w) == 1.0f ? 1 : 0, h, w) = 1.0f;
    }
  return m;
}

void MultiSequenceSlice::validate() const {
  if (images.empty()) throw std::runtime_error("MultiSequenceSlice: no images");
  std::int64_t H = images[0].dim(0), W = images[0].dim(1);
  for (const auto& img : images) {
    if (img.rank() != 2 || img.dim(0) != H || img.dim(1) != W)
      throw std::runtime_error("MultiSequenceSlice: sequence images must share HxW");
  }
  if (mask) {
    mask->validate();
    if (mask->height() != H || mask->width() != W)
      throw std::runtime_error("MultiSequenceSlice: mask size mismatch");
  }
}

}  // namespace carotidseg
