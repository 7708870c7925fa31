#pragma once

#include <filesystem>

#include "carotidseg/tensor.hpp"

namespace carotidseg {

// A stack of K axial slices of size HxW, stored (K,H,W).
struct Volume {
  Tensor data;

  Volume() = default;
  explicit Volume(Tensor t) : data(std::move(t)) {
    if (data.rank() != 3) throw std::invalid_argument("Volume: expected (K,H,W)");
  }
  static Volume zeros(std::int64_t k, std::int64_t h, std::int64_t w) {
    return Volume(Tensor::zeros({k, h, w}));
  }

  std::int64_t depth() const { return data.dim(0); }
  std::int64_t height() const { return data.dim(1); }
  std::int64_t width() const { return data.dim(2); }

  Tensor slice(std::int64_t k) const;
  void set_slice(std::int64_t k, const Tensor& img);
};

// Supported formats, selected by extension:
//   .rvol           little-endian float32 + sidecar text header "<path>.hdr"
//   .nii / .nii.gz  NIfTI-1, written as float32
Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

}  // namespace carotidseg
