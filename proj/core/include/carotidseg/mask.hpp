#pragma once

#include <optional>
#include <string>
#include <vector>

#include "carotidseg/tensor.hpp"

namespace carotidseg {

enum class ClassScheme { binary, multiclass };

std::string to_string(ClassScheme s);
ClassScheme class_scheme_from_string(const std::string& s);
int class_count(ClassScheme s);                       // 2 binary, 3 multiclass
std::vector<std::string> class_names(ClassScheme s);  // fixed code table, index = label code

// Per-pixel one-hot class tensor. data is (C,H,W) with entries in {0,1} and
// per-pixel channel sum exactly 1. Class 0 is always background.
struct SegmentationMask {
  Tensor data;
  std::vector<std::string> classes;

  std::int64_t n_classes() const { return data.dim(0); }
  std::int64_t height() const { return data.dim(1); }
  std::int64_t width() const { return data.dim(2); }

  bool is_one_hot() const;
  void validate() const;  // throws on one-hot violation

  // Integer-coded label map <-> one-hot, code table {0:background, 1:..., }.
  static SegmentationMask from_label_map(const Tensor& labels, ClassScheme scheme);
  Tensor to_label_map() const;

  // Union of all non-background classes as a (H,W) 0/1 image.
  Tensor foreground() const;
  // Collapse to the binary scheme (background / any foreground).
  SegmentationMask to_binary() const;
};

// m aligned single-sequence slices for one patient/slice index.
struct MultiSequenceSlice {
  std::vector<Tensor> images;  // each (H,W)
  std::optional<SegmentationMask> mask;
  std::string patient_id;
  int slice_index = 0;

  std::int64_t height() const { return images.at(0).dim(0); }
  std::int64_t width() const { return images.at(0).dim(1); }
  std::int64_t n_sequences() const { return static_cast<std::int64_t>(images.size()); }
  void validate() const;  // all images share HxW; mask (if any) matches
};

}  // namespace carotidseg
