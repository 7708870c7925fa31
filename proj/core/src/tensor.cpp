#include "carotidseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace carotidseg {

std::int64_t shape_numel(const std::vector<std::int64_t>& dims) {
  std::int64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::int64_t> dims, float fill) : dims_(std::move(dims)) {
  if (dims_.empty() || dims_.size() > 4) throw std::invalid_argument("Tensor: rank must be 1..4");
  for (auto d : dims_) {
    if (d <= 0) throw std::invalid_argument("Tensor: dims must be positive, got " + shape_str());
  }
  data_.assign(static_cast<std::size_t>(shape_numel(dims_)), fill);
}

Tensor Tensor::reshaped(std::vector<std::int64_t> dims) const {
  if (shape_numel(dims) != numel()) throw std::invalid_argument("reshape: element count mismatch");
  Tensor t;
  t.dims_ = std::move(dims);
  t.data_ = data_;
  return t;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

double Tensor::sum() const {
  double s = 0.0;
  for (float v : data_) s += v;
  return s;
}

float Tensor::min() const {
  float m = std::numeric_limits<float>::infinity();
  for (float v : data_) m = std::min(m, v);
  return m;
}

float Tensor::max() const {
  float m = -std::numeric_limits<float>::infinity();
  for (float v : data_) m = std::max(m, v);
  return m;
}

double Tensor::mean() const { return numel() > 0 ? sum() / static_cast<double>(numel()) : 0.0; }

bool Tensor::all_finite() const {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ")";
  return os.str();
}

}  // namespace carotidseg
