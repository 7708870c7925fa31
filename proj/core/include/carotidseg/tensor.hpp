#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace carotidseg {

// Dense row-major float tensor of rank 1..4. Layout conventions across the
// library: batches are (N,C,H,W), single maps are (C,H,W), images are (H,W).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> dims, float fill = 0.0f);

  static Tensor zeros(std::vector<std::int64_t> dims) { return Tensor(std::move(dims), 0.0f); }
  static Tensor ones(std::vector<std::int64_t> dims) { return Tensor(std::move(dims), 1.0f); }
  static Tensor full(std::vector<std::int64_t> dims, float v) { return Tensor(std::move(dims), v); }
  static Tensor scalar(float v) { return Tensor({1}, v); }

  bool empty() const { return data_.empty(); }
  int rank() const { return static_cast<int>(dims_.size()); }
  std::int64_t dim(int i) const { return dims_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::int64_t>& dims() const { return dims_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // (h,w) on rank-2 tensors
  float& at(std::int64_t h, std::int64_t w) { return data_[static_cast<std::size_t>(h * dims_[1] + w)]; }
  float at(std::int64_t h, std::int64_t w) const { return data_[static_cast<std::size_t>(h * dims_[1] + w)]; }
  // (c,h,w) on rank-3 tensors
  float& at(std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>((c * dims_[1] + h) * dims_[2] + w)];
  }
  float at(std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>((c * dims_[1] + h) * dims_[2] + w)];
  }
  // (n,c,h,w) on rank-4 tensors
  float& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w)];
  }
  float at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w)];
  }

  Tensor reshaped(std::vector<std::int64_t> dims) const;
  void fill(float v);

  double sum() const;  // accumulated in double
  float min() const;
  float max() const;
  double mean() const;
  bool all_finite() const;

  std::string shape_str() const;

 private:
  std::vector<std::int64_t> dims_;
  std::vector<float> data_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& dims);

}  // namespace carotidseg
