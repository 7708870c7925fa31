#include "carotidseg/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "carotidseg/rng.hpp"

namespace carotidseg::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bwd) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p.requires_grad()) needs = true;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(bwd);
  }
  return Var(std::move(n));
}

}  // namespace

const Tensor& Var::value() const { return node_->value; }
Tensor& Var::value_mut() { return node_->value; }
Tensor& Var::grad() { return node_->ensure_grad(); }
bool Var::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Node::ensure_grad() {
  if (grad.empty()) grad = Tensor::zeros(value.dims());
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return Var(std::move(n));
}

Var leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

Var detach(const Var& x) { return constant(x.value()); }

void backward(const Var& root) {
  check(root.defined() && root.value().numel() == 1, "backward: root must be scalar");
  if (!root.requires_grad()) return;

  // iterative DFS, reverse finish order
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].node().get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad().fill(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor out = a.value();
  const float* pb = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    for (int k = 0; k < 2; ++k) {
      if (!n.parents[k].requires_grad()) continue;
      Tensor& g = n.parents[k].grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor out = a.value();
  const float* pb = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0].requires_grad()) {
      Tensor& g = n.parents[0].grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1].requires_grad()) {
      Tensor& g = n.parents[1].grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor out = a.value();
  const float* pb = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0].value();
    const Tensor& bv = n.parents[1].value();
    if (n.parents[0].requires_grad()) {
      Tensor& g = n.parents[0].grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1].requires_grad()) {
      Tensor& g = n.parents[1].grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check(a.value().same_shape(b.value()), "div: shape mismatch");
  Tensor out = a.value();
  const float* pb = b.value().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= pb[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0].value();
    const Tensor& bv = n.parents[1].value();
    if (n.parents[0].requires_grad()) {
      Tensor& g = n.parents[0].grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (n.parents[1].requires_grad()) {
      Tensor& g = n.parents[1].grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var affine(const Var& x, float scale, float shift) {
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = scale * out[i] + shift;
  return make_node(std::move(out), {x}, [scale](Node& n) {
    Tensor& g = n.parents[0].grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += scale * n.grad[i];
  });
}

Var pow_scalar(const Var& x, float e) {
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], e);
  return make_node(std::move(out), {x}, [e](Node& n) {
    const Tensor& xv = n.parents[0].value();
    Tensor& g = n.parents[0].grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] * e * std::pow(xv[i], e - 1.0f);
  });
}

Var log_op(const Var& x) {
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return make_node(std::move(out), {x}, [](Node& n) {
    const Tensor& xv = n.parents[0].value();
    Tensor& g = n.parents[0].grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / xv[i];
  });
}

Var clamp(const Var& x, float lo, float hi) {
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
  return make_node(std::move(out), {x}, [lo, hi](Node& n) {
    const Tensor& xv = n.parents[0].value();
    Tensor& g = n.parents[0].grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) g[i] += n.grad[i];
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0f, out[i]);
  return make_node(std::move(out), {x}, [](Node& n) {
    const Tensor& xv = n.parents[0].value();
    Tensor& g = n.parents[0].grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (xv[i] > 0.0f) g[i] += n.grad[i];
  });
}

Var abs_op(const Var& x) {
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::fabs(out[i]);
  return make_node(std::move(out), {x}, [](Node& n) {
    const Tensor& xv = n.parents[0].value();
    Tensor& g = n.parents[0].grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      float s = (xv[i] > 0.0f) ? 1.0f : (xv[i] < 0.0f ? -1.0f : 0.0f);
      g[i] += n.grad[i] * s;
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0f / (1.0f + std::exp(-out[i]));
  Tensor saved = out;
  return make_node(std::move(out), {x}, [saved](Node& n) {
    Tensor& g = n.parents[0].grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] * saved[i] * (1.0f - saved[i]);
  });
}

// ---------------------------------------------------------------------------
// reductions / shape
// ---------------------------------------------------------------------------

Var sum_all(const Var& x) {
  Tensor out({1}, static_cast<float>(x.value().sum()));
  return make_node(std::move(out), {x}, [](Node& n) {
    Tensor& g = n.parents[0].grad();
    float gv = n.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
  });
}

Var mean_all(const Var& x) {
  std::int64_t m = x.value().numel();
  Tensor out({1}, static_cast<float>(x.value().sum() / static_cast<double>(m)));
  return make_node(std::move(out), {x}, [m](Node& n) {
    Tensor& g = n.parents[0].grad();
    float gv = n.grad[0] / static_cast<float>(m);
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
  });
}

Var sum_hw(const Var& x) {
  const Tensor& v = x.value();
  check(v.rank() == 4, "sum_hw: rank-4 expected");
  std::int64_t N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
  Tensor out({N, C, 1, 1});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const float* p = v.data() + (n * C + c) * HW;
      double s = 0.0;
      for (std::int64_t i = 0; i < HW; ++i) s += p[i];
      out[n * C + c] = static_cast<float>(s);
    }
  return make_node(std::move(out), {x}, [N, C, HW](Node& n) {
    Tensor& g = n.parents[0].grad();
    for (std::int64_t b = 0; b < N; ++b)
      for (std::int64_t c = 0; c < C; ++c) {
        float gv = n.grad[b * C + c];
        float* p = g.data() + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) p[i] += gv;
      }
  });
}

Var sum_per_sample(const Var& x) {
  const Tensor& v = x.value();
  check(v.rank() == 4, "sum_per_sample: rank-4 expected");
  std::int64_t N = v.dim(0), M = v.dim(1) * v.dim(2) * v.dim(3);
  Tensor out({N, 1, 1, 1});
  for (std::int64_t n = 0; n < N; ++n) {
    const float* p = v.data() + n * M;
    double s = 0.0;
    for (std::int64_t i = 0; i < M; ++i) s += p[i];
    out[n] = static_cast<float>(s);
  }
  return make_node(std::move(out), {x}, [N, M](Node& n) {
    Tensor& g = n.parents[0].grad();
    for (std::int64_t b = 0; b < N; ++b) {
      float gv = n.grad[b];
      float* p = g.data() + b * M;
      for (std::int64_t i = 0; i < M; ++i) p[i] += gv;
    }
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  check(!xs.empty(), "concat: empty input");
  const Tensor& first = xs[0].value();
  check(first.rank() == 4, "concat: rank-4 expected");
  std::int64_t N = first.dim(0), H = first.dim(2), W = first.dim(3);
  std::int64_t Ctot = 0;
  for (const auto& x : xs) {
    const Tensor& v = x.value();
    check(v.rank() == 4 && v.dim(0) == N && v.dim(2) == H && v.dim(3) == W,
          "concat: incompatible shapes");
    Ctot += v.dim(1);
  }
  std::int64_t HW = H * W;
  Tensor out({N, Ctot, H, W});
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    std::int64_t C = x.value().dim(1);
    for (std::int64_t n = 0; n < N; ++n)
      std::copy_n(x.value().data() + n * C * HW, C * HW,
                  out.data() + (n * Ctot + off) * HW);
    off += C;
  }
  return make_node(std::move(out), xs, [offsets, N, Ctot, HW](Node& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      if (!n.parents[k].requires_grad()) continue;
      Tensor& g = n.parents[k].grad();
      std::int64_t C = g.dim(1);
      for (std::int64_t b = 0; b < N; ++b) {
        const float* src = n.grad.data() + (b * Ctot + offsets[k]) * HW;
        float* dst = g.data() + b * C * HW;
        for (std::int64_t i = 0; i < C * HW; ++i) dst[i] += src[i];
      }
    }
  });
}

Var slice_channels(const Var& x, std::int64_t c0, std::int64_t c1) {
  const Tensor& v = x.value();
  check(v.rank() == 4, "slice_channels: rank-4 expected");
  check(c0 >= 0 && c1 > c0 && c1 <= v.dim(1), "slice_channels: bad range");
  std::int64_t N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3), Cs = c1 - c0;
  Tensor out({N, Cs, v.dim(2), v.dim(3)});
  for (std::int64_t n = 0; n < N; ++n)
    std::copy_n(v.data() + (n * C + c0) * HW, Cs * HW, out.data() + n * Cs * HW);
  return make_node(std::move(out), {x}, [c0, N, C, HW, Cs](Node& n) {
    Tensor& g = n.parents[0].grad();
    for (std::int64_t b = 0; b < N; ++b) {
      const float* src = n.grad.data() + b * Cs * HW;
      float* dst = g.data() + (b * C + c0) * HW;
      for (std::int64_t i = 0; i < Cs * HW; ++i) dst[i] += src[i];
    }
  });
}

Var mul_bcast(const Var& x, const Var& s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  check(xv.rank() == 4 && sv.rank() == 4, "mul_bcast: rank-4 expected");
  check(sv.dim(0) == xv.dim(0) && sv.dim(2) == 1 && sv.dim(3) == 1 &&
            (sv.dim(1) == xv.dim(1) || sv.dim(1) == 1),
        "mul_bcast: scale must be (N,C,1,1) or (N,1,1,1)");
  std::int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  bool per_channel = sv.dim(1) == C;
  Tensor out = xv;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      float sc = per_channel ? sv[n * C + c] : sv[n];
      float* p = out.data() + (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) p[i] *= sc;
    }
  return make_node(std::move(out), {x, s}, [N, C, HW, per_channel](Node& n) {
    const Tensor& xv2 = n.parents[0].value();
    const Tensor& sv2 = n.parents[1].value();
    if (n.parents[0].requires_grad()) {
      Tensor& g = n.parents[0].grad();
      for (std::int64_t b = 0; b < N; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          float sc = per_channel ? sv2[b * C + c] : sv2[b];
          const float* gn = n.grad.data() + (b * C + c) * HW;
          float* p = g.data() + (b * C + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) p[i] += gn[i] * sc;
        }
    }
    if (n.parents[1].requires_grad()) {
      Tensor& g = n.parents[1].grad();
      for (std::int64_t b = 0; b < N; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const float* gn = n.grad.data() + (b * C + c) * HW;
          const float* xp = xv2.data() + (b * C + c) * HW;
          double acc = 0.0;
          for (std::int64_t i = 0; i < HW; ++i) acc += static_cast<double>(gn[i]) * xp[i];
          g[per_channel ? b * C + c : b] += static_cast<float>(acc);
        }
    }
  });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

void im2col(const float* x, std::int64_t C, std::int64_t H, std::int64_t W,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t Ho, std::int64_t Wo, float* col) {
  // col is (C*kh*kw) x (Ho*Wo), row-major
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        float* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          std::int64_t ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) {
            std::fill_n(row + oh * Wo, Wo, 0.0f);
            continue;
          }
          const float* xr = x + (c * H + ih) * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            std::int64_t iw = ow * stride + kj - pad;
            row[oh * Wo + ow] = (iw >= 0 && iw < W) ? xr[iw] : 0.0f;
          }
        }
      }
}

void col2im(const float* col, std::int64_t C, std::int64_t H, std::int64_t W,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t Ho, std::int64_t Wo, float* x) {
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const float* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          std::int64_t ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= H) continue;
          float* xr = x + (c * H + ih) * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            std::int64_t iw = ow * stride + kj - pad;
            if (iw >= 0 && iw < W) xr[iw] += row[oh * Wo + ow];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  check(xv.rank() == 4 && wv.rank() == 4, "conv2d: rank-4 expected");
  std::int64_t N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  std::int64_t Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  check(wv.dim(1) == Cin, "conv2d: channel mismatch");
  check(b.value().rank() == 1 && b.value().dim(0) == Cout, "conv2d: bias shape");
  std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  check(Ho > 0 && Wo > 0, "conv2d: empty output");
  std::int64_t K = Cin * kh * kw;

  Tensor out({N, Cout, Ho, Wo});
  std::vector<float> col(static_cast<std::size_t>(K * Ho * Wo));
  CMapMat Wm(wv.data(), Cout, K);
  for (std::int64_t n = 0; n < N; ++n) {
    im2col(xv.data() + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    CMapMat Cm(col.data(), K, Ho * Wo);
    MapMat Om(out.data() + n * Cout * Ho * Wo, Cout, Ho * Wo);
    Om.noalias() = Wm * Cm;
    for (std::int64_t c = 0; c < Cout; ++c) Om.row(c).array() += b.value()[c];
  }

  auto bwd = [stride, pad, N, Cin, H, W, Cout, kh, kw, Ho, Wo, K](Node& n) {
    const Tensor& xv2 = n.parents[0].value();
    const Tensor& wv2 = n.parents[1].value();
    std::vector<float> col(static_cast<std::size_t>(K * Ho * Wo));
    std::vector<float> dcol(static_cast<std::size_t>(K * Ho * Wo));
    bool need_dx = n.parents[0].requires_grad();
    bool need_dw = n.parents[1].requires_grad();
    bool need_db = n.parents[2].requires_grad();
    CMapMat Wm(wv2.data(), Cout, K);
    for (std::int64_t s = 0; s < N; ++s) {
      CMapMat Gm(n.grad.data() + s * Cout * Ho * Wo, Cout, Ho * Wo);
      if (need_dw) {
        im2col(xv2.data() + s * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
        CMapMat Cm(col.data(), K, Ho * Wo);
        MapMat dWm(n.parents[1].grad().data(), Cout, K);
        dWm.noalias() += Gm * Cm.transpose();
      }
      if (need_dx) {
        MapMat dCm(dcol.data(), K, Ho * Wo);
        dCm.noalias() = Wm.transpose() * Gm;
        col2im(dcol.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
               n.parents[0].grad().data() + s * Cin * H * W);
      }
      if (need_db) {
        Tensor& db = n.parents[2].grad();
        for (std::int64_t c = 0; c < Cout; ++c) db[c] += Gm.row(c).sum();
      }
    }
  };
  return make_node(std::move(out), {x, w, b}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// normalization / activations
// ---------------------------------------------------------------------------

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "instance_norm: rank-4 expected");
  std::int64_t N = xv.dim(0), C = xv.dim(1), M = xv.dim(2) * xv.dim(3);
  check(gamma.value().numel() == C && beta.value().numel() == C, "instance_norm: affine shape");

  Tensor out(xv.dims());
  Tensor xhat(xv.dims());
  std::vector<float> invstd(static_cast<std::size_t>(N * C));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const float* p = xv.data() + (n * C + c) * M;
      double mu = 0.0;
      for (std::int64_t i = 0; i < M; ++i) mu += p[i];
      mu /= static_cast<double>(M);
      double var = 0.0;
      for (std::int64_t i = 0; i < M; ++i) {
        double d = p[i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(M);
      float is = static_cast<float>(1.0 / std::sqrt(var + eps));
      invstd[static_cast<std::size_t>(n * C + c)] = is;
      float g = gamma.value()[c], bb = beta.value()[c];
      float* xh = xhat.data() + (n * C + c) * M;
      float* o = out.data() + (n * C + c) * M;
      for (std::int64_t i = 0; i < M; ++i) {
        xh[i] = (p[i] - static_cast<float>(mu)) * is;
        o[i] = g * xh[i] + bb;
      }
    }

  auto bwd = [N, C, M, xhat = std::move(xhat), invstd = std::move(invstd)](Node& n) {
    const Tensor& gv = n.parents[1].value();
    bool need_dx = n.parents[0].requires_grad();
    bool need_dg = n.parents[1].requires_grad();
    bool need_db = n.parents[2].requires_grad();
    for (std::int64_t b = 0; b < N; ++b)
      for (std::int64_t c = 0; c < C; ++c) {
        const float* dy = n.grad.data() + (b * C + c) * M;
        const float* xh = xhat.data() + (b * C + c) * M;
        if (need_dg) {
          double s = 0.0;
          for (std::int64_t i = 0; i < M; ++i) s += static_cast<double>(dy[i]) * xh[i];
          n.parents[1].grad()[c] += static_cast<float>(s);
        }
        if (need_db) {
          double s = 0.0;
          for (std::int64_t i = 0; i < M; ++i) s += dy[i];
          n.parents[2].grad()[c] += static_cast<float>(s);
        }
        if (need_dx) {
          float g = gv[c];
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (std::int64_t i = 0; i < M; ++i) {
            double dxh = static_cast<double>(dy[i]) * g;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
          }
          float is = invstd[static_cast<std::size_t>(b * C + c)];
          float m1 = static_cast<float>(sum_dxh / M);
          float m2 = static_cast<float>(sum_dxh_xh / M);
          float* dx = n.parents[0].grad().data() + (b * C + c) * M;
          for (std::int64_t i = 0; i < M; ++i)
            dx[i] += is * (dy[i] * g - m1 - xh[i] * m2);
        }
      }
  };
  return make_node(std::move(out), {x, gamma, beta}, std::move(bwd));
}

Var prelu(const Var& x, const Var& slope) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "prelu: rank-4 expected");
  std::int64_t N = xv.dim(0), C = xv.dim(1), M = xv.dim(2) * xv.dim(3);
  check(slope.value().numel() == C, "prelu: slope shape");
  Tensor out(xv.dims());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      float a = slope.value()[c];
      const float* p = xv.data() + (n * C + c) * M;
      float* o = out.data() + (n * C + c) * M;
      for (std::int64_t i = 0; i < M; ++i) o[i] = p[i] > 0.0f ? p[i] : a * p[i];
    }
  return make_node(std::move(out), {x, slope}, [N, C, M](Node& n) {
    const Tensor& xv2 = n.parents[0].value();
    const Tensor& av = n.parents[1].value();
    bool need_dx = n.parents[0].requires_grad();
    bool need_da = n.parents[1].requires_grad();
    for (std::int64_t b = 0; b < N; ++b)
      for (std::int64_t c = 0; c < C; ++c) {
        const float* p = xv2.data() + (b * C + c) * M;
        const float* dy = n.grad.data() + (b * C + c) * M;
        if (need_dx) {
          float a = av[c];
          float* dx = n.parents[0].grad().data() + (b * C + c) * M;
          for (std::int64_t i = 0; i < M; ++i) dx[i] += p[i] > 0.0f ? dy[i] : a * dy[i];
        }
        if (need_da) {
          double s = 0.0;
          for (std::int64_t i = 0; i < M; ++i)
            if (p[i] <= 0.0f) s += static_cast<double>(dy[i]) * p[i];
          n.parents[1].grad()[c] += static_cast<float>(s);
        }
      }
  });
}

Var softmax_channels(const Var& x) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "softmax: rank-4 expected");
  std::int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor out(xv.dims());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < HW; ++i) {
      float mx = -1e30f;
      for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, xv[(n * C + c) * HW + i]);
      double z = 0.0;
      for (std::int64_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(xv[(n * C + c) * HW + i]) - mx);
      for (std::int64_t c = 0; c < C; ++c)
        out[(n * C + c) * HW + i] =
            static_cast<float>(std::exp(static_cast<double>(xv[(n * C + c) * HW + i]) - mx) / z);
    }
  Tensor saved = out;
  return make_node(std::move(out), {x}, [N, C, HW, saved](Node& n) {
    Tensor& dx = n.parents[0].grad();
    for (std::int64_t b = 0; b < N; ++b)
      for (std::int64_t i = 0; i < HW; ++i) {
        double dot = 0.0;
        for (std::int64_t c = 0; c < C; ++c)
          dot += static_cast<double>(n.grad[(b * C + c) * HW + i]) * saved[(b * C + c) * HW + i];
        for (std::int64_t c = 0; c < C; ++c) {
          std::int64_t k = (b * C + c) * HW + i;
          dx[k] += saved[k] * (n.grad[k] - static_cast<float>(dot));
        }
      }
  });
}

Var maxpool2x2(const Var& x) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "maxpool: rank-4 expected");
  std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  check(H % 2 == 0 && W % 2 == 0, "maxpool: dims must be even");
  std::int64_t Ho = H / 2, Wo = W / 2;
  Tensor out({N, C, Ho, Wo});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(out.numel()));
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const float* p = xv.data() + nc * H * W;
    float* o = out.data() + nc * Ho * Wo;
    for (std::int64_t oh = 0; oh < Ho; ++oh)
      for (std::int64_t ow = 0; ow < Wo; ++ow) {
        std::int64_t best = (2 * oh) * W + 2 * ow;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            std::int64_t k = (2 * oh + di) * W + 2 * ow + dj;
            if (p[k] > p[best]) best = k;
          }
        o[oh * Wo + ow] = p[best];
        arg[static_cast<std::size_t>(nc * Ho * Wo + oh * Wo + ow)] = best;
      }
  }
  return make_node(std::move(out), {x}, [N, C, H, W, Ho, Wo, arg = std::move(arg)](Node& n) {
    Tensor& dx = n.parents[0].grad();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      float* dp = dx.data() + nc * H * W;
      const float* g = n.grad.data() + nc * Ho * Wo;
      for (std::int64_t i = 0; i < Ho * Wo; ++i)
        dp[arg[static_cast<std::size_t>(nc * Ho * Wo + i)]] += g[i];
    }
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "gap: rank-4 expected");
  std::int64_t N = xv.dim(0), C = xv.dim(1), M = xv.dim(2) * xv.dim(3);
  Tensor out({N, C, 1, 1});
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const float* p = xv.data() + nc * M;
    double s = 0.0;
    for (std::int64_t i = 0; i < M; ++i) s += p[i];
    out[nc] = static_cast<float>(s / M);
  }
  return make_node(std::move(out), {x}, [N, C, M](Node& n) {
    Tensor& dx = n.parents[0].grad();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      float gv = n.grad[nc] / static_cast<float>(M);
      float* p = dx.data() + nc * M;
      for (std::int64_t i = 0; i < M; ++i) p[i] += gv;
    }
  });
}

Var pixel_shuffle(const Var& x, int r) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "pixel_shuffle: rank-4 expected");
  std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  check(r >= 1, "pixel_shuffle: r >= 1");
  check(C % (static_cast<std::int64_t>(r) * r) == 0, "pixel_shuffle: channels not divisible by r^2");
  std::int64_t Co = C / (static_cast<std::int64_t>(r) * r);
  Tensor out({N, Co, H * r, W * r});
  // out[n, c, h*r+i, w*r+j] = in[n, (i*r+j)*Co + c, h, w]
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < Co; ++c)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
          const float* src = xv.data() + ((n * C + (static_cast<std::int64_t>(i) * r + j) * Co + c) * H) * W;
          for (std::int64_t h = 0; h < H; ++h) {
            float* dst = out.data() + ((n * Co + c) * (H * r) + h * r + i) * (W * r) + j;
            const float* s = src + h * W;
            for (std::int64_t w = 0; w < W; ++w) dst[w * r] = s[w];
          }
        }
  return make_node(std::move(out), {x}, [N, C, H, W, r, Co](Node& n) {
    Tensor& dx = n.parents[0].grad();
    for (std::int64_t b = 0; b < N; ++b)
      for (std::int64_t c = 0; c < Co; ++c)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < r; ++j) {
            float* dst = dx.data() + ((b * C + (static_cast<std::int64_t>(i) * r + j) * Co + c) * H) * W;
            for (std::int64_t h = 0; h < H; ++h) {
              const float* g = n.grad.data() + ((b * Co + c) * (H * r) + h * r + i) * (W * r) + j;
              float* d = dst + h * W;
              for (std::int64_t w = 0; w < W; ++w) d[w] += g[w * r];
            }
          }
  });
}

Var upsample_bilinear2x(const Var& x) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "upsample: rank-4 expected");
  std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  std::int64_t Ho = H * 2, Wo = W * 2;
  // align_corners=false source grid; borders clamp
  std::vector<std::int64_t> y0(static_cast<std::size_t>(Ho)), x0(static_cast<std::size_t>(Wo));
  std::vector<float> wy(static_cast<std::size_t>(Ho)), wx(static_cast<std::size_t>(Wo));
  for (std::int64_t oy = 0; oy < Ho; ++oy) {
    double sy = (oy + 0.5) / 2.0 - 0.5;
    sy = std::max(0.0, std::min<double>(sy, H - 1));
    y0[static_cast<std::size_t>(oy)] = std::min<std::int64_t>(static_cast<std::int64_t>(sy), H - 2 >= 0 ? H - 2 : 0);
    wy[static_cast<std::size_t>(oy)] = static_cast<float>(sy - y0[static_cast<std::size_t>(oy)]);
  }
  for (std::int64_t ox = 0; ox < Wo; ++ox) {
    double sx = (ox + 0.5) / 2.0 - 0.5;
    sx = std::max(0.0, std::min<double>(sx, W - 1));
    x0[static_cast<std::size_t>(ox)] = std::min<std::int64_t>(static_cast<std::int64_t>(sx), W - 2 >= 0 ? W - 2 : 0);
    wx[static_cast<std::size_t>(ox)] = static_cast<float>(sx - x0[static_cast<std::size_t>(ox)]);
  }
  Tensor out({N, C, Ho, Wo});
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const float* p = xv.data() + nc * H * W;
    float* o = out.data() + nc * Ho * Wo;
    for (std::int64_t oy = 0; oy < Ho; ++oy) {
      std::int64_t yy = y0[static_cast<std::size_t>(oy)];
      float fy = wy[static_cast<std::size_t>(oy)];
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        std::int64_t xx = x0[static_cast<std::size_t>(ox)];
        float fx = wx[static_cast<std::size_t>(ox)];
        float v00 = p[yy * W + xx], v01 = p[yy * W + xx + 1];
        float v10 = p[(yy + 1) * W + xx], v11 = p[(yy + 1) * W + xx + 1];
        o[oy * Wo + ox] = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
      }
    }
  }
  return make_node(std::move(out), {x},
                   [N, C, H, W, Ho, Wo, y0 = std::move(y0), x0 = std::move(x0), wy = std::move(wy),
                    wx = std::move(wx)](Node& n) {
                     Tensor& dx = n.parents[0].grad();
                     for (std::int64_t nc = 0; nc < N * C; ++nc) {
                       float* dp = dx.data() + nc * H * W;
                       const float* g = n.grad.data() + nc * Ho * Wo;
                       for (std::int64_t oy = 0; oy < Ho; ++oy) {
                         std::int64_t yy = y0[static_cast<std::size_t>(oy)];
                         float fy = wy[static_cast<std::size_t>(oy)];
                         for (std::int64_t ox = 0; ox < Wo; ++ox) {
                           std::int64_t xx = x0[static_cast<std::size_t>(ox)];
                           float fx = wx[static_cast<std::size_t>(ox)];
                           float gv = g[oy * Wo + ox];
                           dp[yy * W + xx] += (1 - fy) * (1 - fx) * gv;
                           dp[yy * W + xx + 1] += (1 - fy) * fx * gv;
                           dp[(yy + 1) * W + xx] += fy * (1 - fx) * gv;
                           dp[(yy + 1) * W + xx + 1] += fy * fx * gv;
                         }
                       }
                     }
                   });
}

Var dropout(const Var& x, float p, std::uint64_t seed, bool active) {
  if (!active || p <= 0.0f) return x;
  check(p < 1.0f, "dropout: p must be < 1");
  Rng rng(seed);
  Tensor mask(x.value().dims());
  float keep = 1.0f / (1.0f - p);
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    mask[i] = rng.uniform(0.0, 1.0) < p ? 0.0f : keep;
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return make_node(std::move(out), {x}, [mask = std::move(mask)](Node& n) {
    Tensor& g = n.parents[0].grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * mask[i];
  });
}

}  // namespace carotidseg::ag
