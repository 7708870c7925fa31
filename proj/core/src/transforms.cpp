#include "carotidseg/transforms.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace carotidseg {

bool GeometricParams::is_identity() const {
  bool persp0 = true;
  for (double d : perspective) persp0 &= d == 0.0;
  return !flip_h && rotation_deg == 0.0 && scale == 1.0 && crop_dr == 0 && crop_dc == 0 && persp0;
}

void PerturbationPolicy::validate() const {
  auto chk = [](const ParamRange& r, const char* name) {
    if (r.lo > r.hi) throw std::invalid_argument(std::string("policy: range min > max for ") + name);
  };
  chk(rotation_deg, "rotation_deg");
  chk(scale_weak, "scale_weak");
  chk(scale_strong, "scale_strong");
  chk(noise_std, "noise_std");
  chk(sharpness, "sharpness");
  chk(intensity_gamma, "intensity_gamma");
  if (flip_prob < 0.0 || flip_prob > 1.0) throw std::invalid_argument("policy: flip_prob not in [0,1]");
  if (max_crop_offset < 0) throw std::invalid_argument("policy: max_crop_offset < 0");
  if (max_perspective_frac < 0.0) throw std::invalid_argument("policy: max_perspective_frac < 0");
}

void PerturbationPolicy::disable_geometric() {
  enable_flip = enable_rotation = enable_scale = enable_crop = enable_perspective = false;
}

void PerturbationPolicy::disable_photometric() {
  enable_noise = enable_sharpness = enable_intensity = false;
}

PerturbationParams sample_perturbation(const PerturbationPolicy& policy, Rng& rng) {
  policy.validate();
  PerturbationParams p;
  if (policy.enable_flip) p.gamma.flip_h = rng.bernoulli(policy.flip_prob);
  if (policy.enable_rotation)
    p.gamma.rotation_deg = rng.uniform(policy.rotation_deg.lo, policy.rotation_deg.hi);
  if (policy.enable_scale) {
    const ParamRange& r = rng.bernoulli(policy.strong_scale_prob) ? policy.scale_strong : policy.scale_weak;
    p.gamma.scale = rng.uniform(r.lo, r.hi);
  }
  if (policy.enable_crop && policy.max_crop_offset > 0) {
    p.gamma.crop_dr = rng.uniform_int(-policy.max_crop_offset, policy.max_crop_offset);
    p.gamma.crop_dc = rng.uniform_int(-policy.max_crop_offset, policy.max_crop_offset);
  }
  if (policy.enable_perspective)
    for (auto& d : p.gamma.perspective)
      d = rng.uniform(-policy.max_perspective_frac, policy.max_perspective_frac);
  if (policy.enable_noise) p.phi.noise_std = rng.uniform(policy.noise_std.lo, policy.noise_std.hi);
  if (policy.enable_sharpness) p.phi.sharpness = rng.uniform(policy.sharpness.lo, policy.sharpness.hi);
  if (policy.enable_intensity)
    p.phi.intensity_gamma = rng.uniform(policy.intensity_gamma.lo, policy.intensity_gamma.hi);
  p.phi.dropout_seed = rng.next_u64();
  return p;
}

namespace {

using Mat3 = Eigen::Matrix3d;

// Rotation entries snap to exact 0/±1 at multiples of 90 degrees so that
// support-preserving transforms sample pixel centers exactly.
Mat3 rotation_about(double deg, double cx, double cy) {
  double c, s;
  double q = deg / 90.0;
  double qr = std::round(q);
  if (std::abs(q - qr) < 1e-12) {
    int k = static_cast<int>(qr) & 3;
    if (k < 0) k += 4;
    const double ctab[4] = {1.0, 0.0, -1.0, 0.0};
    const double stab[4] = {0.0, 1.0, 0.0, -1.0};
    c = ctab[k];
    s = stab[k];
  } else {
    double rad = deg * M_PI / 180.0;
    c = std::cos(rad);
    s = std::sin(rad);
  }
  Mat3 m = Mat3::Identity();
  m(0, 0) = c;  m(0, 1) = -s;  m(0, 2) = cx - c * cx + s * cy;
  m(1, 0) = s;  m(1, 1) = c;   m(1, 2) = cy - s * cx - c * cy;
  return m;
}

Mat3 perspective_forward(const std::array<double, 8>& d, std::int64_t H, std::int64_t W) {
  bool zero = true;
  for (double v : d) zero &= v == 0.0;
  if (zero) return Mat3::Identity();

  double w = static_cast<double>(W - 1), h = static_cast<double>(H - 1);
  // order TL,TR,BL,BR; displacements are fractions of (w,h)
  double sx[4] = {0, w, 0, w}, sy[4] = {0, 0, h, h};
  double dx[4], dy[4];
  for (int i = 0; i < 4; ++i) {
    dx[i] = sx[i] + d[static_cast<std::size_t>(2 * i)] * w;
    dy[i] = sy[i] + d[static_cast<std::size_t>(2 * i + 1)] * h;
  }
  Eigen::Matrix<double, 8, 8> A;
  Eigen::Matrix<double, 8, 1> rhs;
  for (int i = 0; i < 4; ++i) {
    A.row(2 * i) << sx[i], sy[i], 1, 0, 0, 0, -dx[i] * sx[i], -dx[i] * sy[i];
    A.row(2 * i + 1) << 0, 0, 0, sx[i], sy[i], 1, -dy[i] * sx[i], -dy[i] * sy[i];
    rhs(2 * i) = dx[i];
    rhs(2 * i + 1) = dy[i];
  }
  Eigen::Matrix<double, 8, 1> sol = A.partialPivLu().solve(rhs);
  Mat3 m;
  m << sol(0), sol(1), sol(2), sol(3), sol(4), sol(5), sol(6), sol(7), 1.0;
  return m;
}

// Forward map from input pixel coordinates (x=col, y=row, homogeneous) to
// output coordinates.
Mat3 forward_matrix(const GeometricParams& g, std::int64_t H, std::int64_t W) {
  double cx = (static_cast<double>(W) - 1.0) / 2.0;
  double cy = (static_cast<double>(H) - 1.0) / 2.0;

  Mat3 flip = Mat3::Identity();
  if (g.flip_h) {
    flip(0, 0) = -1.0;
    flip(0, 2) = static_cast<double>(W) - 1.0;
  }
  Mat3 scale = Mat3::Identity();
  scale(0, 0) = scale(1, 1) = g.scale;
  scale(0, 2) = cx * (1.0 - g.scale);
  scale(1, 2) = cy * (1.0 - g.scale);

  Mat3 rot = rotation_about(g.rotation_deg, cx, cy);
  Mat3 persp = perspective_forward(g.perspective, H, W);

  Mat3 crop = Mat3::Identity();
  crop(0, 2) = -static_cast<double>(g.crop_dc);
  crop(1, 2) = -static_cast<double>(g.crop_dr);

  return crop * persp * rot * scale * flip;
}

Tensor warp(const Tensor& chw, const Mat3& inv, Interp interp) {
  std::int64_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  Tensor out({C, H, W});
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) {
      double xw = inv(0, 0) * c + inv(0, 1) * r + inv(0, 2);
      double yw = inv(1, 0) * c + inv(1, 1) * r + inv(1, 2);
      double ww = inv(2, 0) * c + inv(2, 1) * r + inv(2, 2);
      double sx = xw / ww, sy = yw / ww;
      if (interp == Interp::nearest) {
        std::int64_t ix = static_cast<std::int64_t>(std::llround(sx));
        std::int64_t iy = static_cast<std::int64_t>(std::llround(sy));
        if (ix < 0 || ix >= W || iy < 0 || iy >= H) continue;
        for (std::int64_t ch = 0; ch < C; ++ch) out.at(ch, r, c) = chw.at(ch, iy, ix);
      } else {
        std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
        std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
        double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
        if (x0 < -1 || x0 >= W || y0 < -1 || y0 >= H) continue;
        auto tap = [&](std::int64_t ch, std::int64_t y, std::int64_t x) -> double {
          return (x >= 0 && x < W && y >= 0 && y < H) ? chw.at(ch, y, x) : 0.0;
        };
        for (std::int64_t ch = 0; ch < C; ++ch) {
          double v = (1 - fy) * ((1 - fx) * tap(ch, y0, x0) + fx * tap(ch, y0, x0 + 1)) +
                     fy * ((1 - fx) * tap(ch, y0 + 1, x0) + fx * tap(ch, y0 + 1, x0 + 1));
          out.at(ch, r, c) = static_cast<float>(v);
        }
      }
    }
  return out;
}

Mat3 inverse_map(const GeometricParams& g, std::int64_t H, std::int64_t W) {
  return forward_matrix(g, H, W).inverse();
}

}  // namespace

Tensor apply_geometric(const Tensor& chw, const GeometricParams& gamma, Interp interp) {
  if (chw.rank() != 3) throw std::invalid_argument("apply_geometric: expected (C,H,W)");
  if (gamma.is_identity()) return chw;
  return warp(chw, inverse_map(gamma, chw.dim(1), chw.dim(2)), interp);
}

Tensor apply_geometric_mask(const Tensor& onehot_chw, const GeometricParams& gamma) {
  Tensor out = apply_geometric(onehot_chw, gamma, Interp::nearest);
  std::int64_t C = out.dim(0), H = out.dim(1), W = out.dim(2);
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) {
      float sum = 0.0f;
      for (std::int64_t ch = 0; ch < C; ++ch) sum += out.at(ch, r, c);
      if (sum == 0.0f) out.at(0, r, c) = 1.0f;
    }
  return out;
}

Tensor transform_probability_map(const Tensor& probs_chw, const GeometricParams& gamma) {
  Tensor out = apply_geometric(probs_chw, gamma, Interp::bilinear);
  std::int64_t C = out.dim(0), H = out.dim(1), W = out.dim(2);
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) {
      double sum = 0.0;
      for (std::int64_t ch = 0; ch < C; ++ch) sum += out.at(ch, r, c);
      if (sum > 1e-8) {
        for (std::int64_t ch = 0; ch < C; ++ch)
          out.at(ch, r, c) = static_cast<float>(out.at(ch, r, c) / sum);
      }
    }
  return out;
}

Tensor apply_photometric(const Tensor& image_hw, const PhotometricParams& phi) {
  if (image_hw.rank() != 2) throw std::invalid_argument("apply_photometric: expected (H,W)");
  std::int64_t H = image_hw.dim(0), W = image_hw.dim(1);
  Tensor x = image_hw;

  if (phi.sharpness != 1.0) {
    // 3x3 Gaussian blur with replicated borders; out = blur + f*(x - blur)
    static const float k[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
    Tensor blur({H, W});
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t c = 0; c < W; ++c) {
        float acc = 0.0f;
        for (int i = -1; i <= 1; ++i)
          for (int j = -1; j <= 1; ++j) {
            std::int64_t rr = std::clamp<std::int64_t>(r + i, 0, H - 1);
            std::int64_t cc = std::clamp<std::int64_t>(c + j, 0, W - 1);
            acc += k[i + 1][j + 1] * x.at(rr, cc);
          }
        blur.at(r, c) = acc / 16.0f;
      }
    float f = static_cast<float>(phi.sharpness);
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = blur[i] + f * (x[i] - blur[i]);
  }

  if (phi.intensity_gamma != 1.0) {
    float g = static_cast<float>(phi.intensity_gamma);
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = std::pow(std::max(x[i], 0.0f), g);
  }

  if (phi.noise_std > 0.0) {
    Rng rng(derive_seed(phi.dropout_seed, 0x6E6F6973ULL));  // independent noise stream
    for (std::int64_t i = 0; i < x.numel(); ++i)
      x[i] += static_cast<float>(rng.normal(0.0, phi.noise_std));
  }

  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = std::clamp(x[i], 0.0f, 1.0f);
  return x;
}

Tensor validity_mask(const GeometricParams& gamma, std::int64_t H, std::int64_t W, std::int64_t C) {
  Tensor ones = Tensor::ones({C, H, W});
  Tensor warped = apply_geometric(ones, gamma, Interp::nearest);
  for (std::int64_t i = 0; i < warped.numel(); ++i) warped[i] = warped[i] == 1.0f ? 1.0f : 0.0f;
  return warped;
}

}  // namespace carotidseg
