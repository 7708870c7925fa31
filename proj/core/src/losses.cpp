#include "carotidseg/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace carotidseg {

using ag::Var;

LossConfig LossConfig::loc_defaults() {
  LossConfig c;
  c.rampup_R = 60.0;
  c.rampup_k = 10.0;
  return c;
}

LossConfig LossConfig::seg_defaults() {
  LossConfig c;
  c.rampup_R = 40.0;
  c.rampup_k = 20.0;
  return c;
}

double rampup_unit(double t, double R) {
  if (R <= 0.0) throw std::invalid_argument("rampup: R must be > 0");
  double x = 1.0 - std::min(t, R) / R;
  return std::exp(-5.0 * x * x);
}

double rampup_weight(double t, double R, double k) { return k * rampup_unit(t, R); }

double uncertainty_threshold(double t, const LossConfig& cfg) {
  return std::log(2.0) * (0.75 + rampup_unit(t, cfg.rampup_R) / 4.0);
}

namespace {

void check_pg(const Var& p, const Tensor& g) {
  if (!p.defined()) throw std::invalid_argument("loss: undefined prediction");
  if (!p.value().same_shape(g))
    throw std::invalid_argument("loss: prediction/target shape mismatch " + p.value().shape_str() +
                                " vs " + g.shape_str());
  if (p.value().rank() != 4) throw std::invalid_argument("loss: expected (N,C,H,W)");
}

}  // namespace

Var modified_tversky_index(const Var& p, const Tensor& g, double delta, double eps) {
  check_pg(p, g);
  Var gv = ag::constant(g);
  Var tp = ag::sum_hw(ag::mul(p, gv));                               // sum g*p
  Var fn = ag::sum_hw(ag::mul(ag::affine(p, -1.0f, 1.0f), gv));      // sum g*(1-p)
  Var one_minus_g = ag::constant([&] {
    Tensor t = g;
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = 1.0f - t[i];
    return t;
  }());
  Var fp = ag::sum_hw(ag::mul(p, one_minus_g));                      // sum (1-g)*p
  float d = static_cast<float>(delta);
  Var denom = ag::add(tp, ag::add(ag::affine(fn, d, 0.0f), ag::affine(fp, 1.0f - d, 0.0f)));
  denom = ag::clamp(denom, static_cast<float>(eps), 3e38f);
  return ag::div(tp, denom);
}

double modified_tversky_value(const Tensor& p, const Tensor& g, double delta, double eps) {
  if (!p.same_shape(g)) throw std::invalid_argument("mTI: shape mismatch");
  double tp = 0.0, fn = 0.0, fp = 0.0;
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    double pi = p[i], gi = g[i];
    tp += gi * pi;
    fn += gi * (1.0 - pi);
    fp += (1.0 - gi) * pi;
  }
  double denom = tp + delta * fn + (1.0 - delta) * fp;
  if (denom < eps) denom = eps;
  return tp / denom;
}

Var bce(const Var& p, const Tensor& g, double eps) {
  check_pg(p, g);
  float e = static_cast<float>(eps);
  Var pc = ag::clamp(p, e, 1.0f - e);
  Var gv = ag::constant(g);
  Var one_minus_g = ag::constant([&] {
    Tensor t = g;
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = 1.0f - t[i];
    return t;
  }());
  Var term = ag::add(ag::mul(gv, ag::log_op(pc)),
                     ag::mul(one_minus_g, ag::log_op(ag::affine(pc, -1.0f, 1.0f))));
  return ag::affine(ag::mean_all(term), -1.0f, 0.0f);
}

Var loc_supervised_loss(const Var& p, const Tensor& g, const LossConfig& cfg) {
  Var mti = modified_tversky_index(p, g, cfg.delta_loc, cfg.eps);
  Var tversky_loss = ag::mean_all(ag::affine(mti, -1.0f, 1.0f));
  Var b = bce(p, g, cfg.eps);
  float l = static_cast<float>(cfg.lambda_loc);
  return ag::add(ag::affine(tversky_loss, l, 0.0f), ag::affine(b, 1.0f - l, 0.0f));
}

Var asym_focal(const Var& p, const Tensor& g, double delta, double vartheta, double eps) {
  check_pg(p, g);
  std::int64_t C = p.value().dim(1);
  if (C < 2) throw std::invalid_argument("asym_focal: needs >= 2 classes");
  std::int64_t N = p.value().dim(0);
  std::int64_t M = p.value().dim(2) * p.value().dim(3);
  float e = static_cast<float>(eps);
  Var pc = ag::clamp(p, e, 1.0f - e);
  Var gv = ag::constant(g);

  // rare classes: plain delta-weighted cross entropy
  Var p_rare = ag::slice_channels(pc, 1, C);
  Var g_rare = ag::slice_channels(gv, 1, C);
  Var rare_sum = ag::sum_all(ag::mul(g_rare, ag::log_op(p_rare)));

  // background: focal factor (1 - p_b)^vartheta
  Var p_b = ag::slice_channels(pc, 0, 1);
  Var g_b = ag::slice_channels(gv, 0, 1);
  Var focal = ag::pow_scalar(ag::affine(p_b, -1.0f, 1.0f), static_cast<float>(vartheta));
  Var bg_sum = ag::sum_all(ag::mul(focal, ag::mul(g_b, ag::log_op(p_b))));

  float d = static_cast<float>(delta);
  float inv = 1.0f / static_cast<float>(N * M);
  return ag::add(ag::affine(rare_sum, -d * inv, 0.0f), ag::affine(bg_sum, -(1.0f - d) * inv, 0.0f));
}

Var asym_focal_tversky(const Var& p, const Tensor& g, double delta, double vartheta, double eps) {
  check_pg(p, g);
  std::int64_t C = p.value().dim(1);
  if (C < 2) throw std::invalid_argument("asym_focal_tversky: needs >= 2 classes");
  std::int64_t N = p.value().dim(0);
  Var mti = modified_tversky_index(p, g, delta, eps);  // (N,C,1,1)
  Var one_minus = ag::affine(mti, -1.0f, 1.0f);
  Var bg = ag::slice_channels(one_minus, 0, 1);
  Var rare = ag::pow_scalar(ag::slice_channels(one_minus, 1, C), static_cast<float>(1.0 - vartheta));
  Var total = ag::add(ag::sum_all(bg), ag::sum_all(rare));
  return ag::affine(total, 1.0f / static_cast<float>(N), 0.0f);
}

Var seg_supervised_loss(const Var& p, const Tensor& g, const LossConfig& cfg) {
  Var f = asym_focal(p, g, cfg.delta_seg, cfg.vartheta, cfg.eps);
  Var ft = asym_focal_tversky(p, g, cfg.delta_seg, cfg.vartheta, cfg.eps);
  float l = static_cast<float>(cfg.lambda_seg);
  return ag::add(ag::affine(f, l, 0.0f), ag::affine(ft, 1.0f - l, 0.0f));
}

namespace {

Var weighted_consistency(const Var& p_student, const Tensor& p_teacher, const Tensor& weight) {
  if (!p_student.value().same_shape(p_teacher) || !p_student.value().same_shape(weight))
    throw std::invalid_argument("consistency: shape mismatch");
  if (p_student.value().rank() != 4) throw std::invalid_argument("consistency: expected (N,C,H,W)");
  std::int64_t N = p_student.value().dim(0);
  std::int64_t M = p_student.value().numel() / N;

  // per-sample weight sums decide normalization; zero-weight samples drop out
  Tensor scale({N, 1, 1, 1});
  int n_valid = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    double sw = 0.0;
    const float* wp = weight.data() + n * M;
    for (std::int64_t i = 0; i < M; ++i) sw += wp[i];
    if (sw > 0.0) {
      scale[n] = static_cast<float>(1.0 / sw);
      ++n_valid;
    }
  }
  if (n_valid == 0) return ag::constant(Tensor::scalar(0.0f));

  Var diff = ag::sub(p_student, ag::constant(p_teacher));
  Var sq = ag::mul(diff, diff);
  Var num = ag::sum_per_sample(ag::mul(sq, ag::constant(weight)));  // (N,1,1,1)
  Var per_sample = ag::mul(num, ag::constant(scale));
  return ag::affine(ag::sum_all(per_sample), 1.0f / static_cast<float>(n_valid), 0.0f);
}

}  // namespace

Var consistency_mse(const Var& p_student, const Tensor& p_teacher_transformed,
                    const Tensor& validity) {
  return weighted_consistency(p_student, p_teacher_transformed, validity);
}

Var uncertainty_consistency(const Var& p_student, const Tensor& p_teacher_transformed,
                            const Tensor& validity, const Tensor& u_transformed, double tau) {
  const Tensor& pv = p_student.value();
  if (pv.rank() != 4) throw std::invalid_argument("uncertainty_consistency: expected (N,C,H,W)");
  std::int64_t N = pv.dim(0), C = pv.dim(1), HW = pv.dim(2) * pv.dim(3);
  if (u_transformed.rank() != 4 || u_transformed.dim(0) != N || u_transformed.dim(1) != 1 ||
      u_transformed.dim(2) != pv.dim(2) || u_transformed.dim(3) != pv.dim(3))
    throw std::invalid_argument("uncertainty_consistency: uncertainty map must be (N,1,H,W)");
  if (!validity.same_shape(pv))
    throw std::invalid_argument("uncertainty_consistency: validity shape mismatch");

  Tensor w = validity;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < HW; ++i) {
      bool certain = u_transformed[n * HW + i] < static_cast<float>(tau);
      if (!certain)
        for (std::int64_t c = 0; c < C; ++c) w[(n * C + c) * HW + i] = 0.0f;
    }
  return weighted_consistency(p_student, p_teacher_transformed, w);
}

Tensor predictive_entropy(const std::vector<Tensor>& prob_stack) {
  if (prob_stack.empty()) throw std::invalid_argument("predictive_entropy: T must be >= 1");
  const Tensor& first = prob_stack[0];
  if (first.rank() != 3) throw std::invalid_argument("predictive_entropy: passes must be (C,H,W)");
  std::int64_t C = first.dim(0), H = first.dim(1), W = first.dim(2);
  for (const auto& t : prob_stack)
    if (!t.same_shape(first)) throw std::invalid_argument("predictive_entropy: pass shape mismatch");

  double invT = 1.0 / static_cast<double>(prob_stack.size());
  Tensor u({H, W});
  for (std::int64_t i = 0; i < H * W; ++i) {
    double ent = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
      double pbar = 0.0;
      for (const auto& t : prob_stack) pbar += t[c * H * W + i];
      pbar *= invT;
      if (pbar > 0.0) ent -= pbar * std::log(pbar);
    }
    u[i] = static_cast<float>(std::max(0.0, ent));
  }
  return u;
}

Tensor expand_binary_probs(const Tensor& p_1hw) {
  if (p_1hw.rank() != 3 || p_1hw.dim(0) != 1)
    throw std::invalid_argument("expand_binary_probs: expected (1,H,W)");
  std::int64_t H = p_1hw.dim(1), W = p_1hw.dim(2);
  Tensor out({2, H, W});
  for (std::int64_t i = 0; i < H * W; ++i) {
    out[i] = 1.0f - p_1hw[i];
    out[H * W + i] = p_1hw[i];
  }
  return out;
}

}  // namespace carotidseg
