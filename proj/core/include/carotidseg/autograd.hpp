#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "carotidseg/tensor.hpp"

namespace carotidseg::ag {

struct Node;

// Handle to a node of the computation tape. Copying a Var shares the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  Tensor& value_mut();
  Tensor& grad();
  bool requires_grad() const;
  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily; same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

// Tape recording can be suspended for teacher/inference passes.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

Var constant(Tensor v);
Var leaf(Tensor v, bool requires_grad = true);
Var detach(const Var& x);

// Runs reverse-mode accumulation from a scalar root.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var affine(const Var& x, float scale, float shift);  // scale*x + shift
Var pow_scalar(const Var& x, float e);
Var log_op(const Var& x);
Var clamp(const Var& x, float lo, float hi);
Var relu(const Var& x);
Var abs_op(const Var& x);
Var sigmoid(const Var& x);

// ---- reductions / shape ----
Var sum_all(const Var& x);                       // -> (1)
Var mean_all(const Var& x);                      // -> (1)
Var sum_hw(const Var& x);                        // (N,C,H,W) -> (N,C,1,1)
Var sum_per_sample(const Var& x);                // (N,C,H,W) -> (N,1,1,1)
Var concat_channels(const std::vector<Var>& xs); // along dim 1
Var slice_channels(const Var& x, std::int64_t c0, std::int64_t c1);  // [c0,c1)
// Broadcast multiply: s has shape (N,C,1,1) or (N,1,1,1); x is (N,C,H,W).
Var mul_bcast(const Var& x, const Var& s);

// ---- neural net ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
Var prelu(const Var& x, const Var& slope);
Var softmax_channels(const Var& x);
Var maxpool2x2(const Var& x);
Var global_avg_pool(const Var& x);
Var pixel_shuffle(const Var& x, int r);
Var upsample_bilinear2x(const Var& x);
Var dropout(const Var& x, float p, std::uint64_t seed, bool active);

}  // namespace carotidseg::ag
