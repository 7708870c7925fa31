#pragma once

#include <vector>

#include "carotidseg/autograd.hpp"
#include "carotidseg/tensor.hpp"

namespace carotidseg {

struct LossConfig {
  double lambda_loc = 0.5;
  double delta_loc = 0.7;
  double lambda_seg = 0.5;
  double delta_seg = 0.6;
  double vartheta = 0.25;
  double rampup_R = 60.0;  // in epochs
  double rampup_k = 10.0;
  double omega = 0.1;   // prior-loss weight in the localization objective
  double eps = 1e-7;    // log / denominator clamp

  static LossConfig loc_defaults();
  static LossConfig seg_defaults();
};

// lambda(t) = k * exp(-5 (1 - min(t,R)/R)^2); nondecreasing, equals k at t>=R.
double rampup_weight(double t, double R, double k);
// Same ramp normalized to [e^-5, 1].
double rampup_unit(double t, double R);
// tau(t) = ln(2) * (3/4 + rampup_unit(t)/4); spans [0.75 ln2, ln2].
double uncertainty_threshold(double t, const LossConfig& cfg);

// Modified Tversky index per (sample, class): p and g are (N,C,H,W); returns
// (N,C,1,1) with values in [0,1]. g is a constant one-hot tensor.
ag::Var modified_tversky_index(const ag::Var& p, const Tensor& g, double delta, double eps = 1e-7);

// Scalar mTI over one flattened mask pair, computed entirely in double.
double modified_tversky_value(const Tensor& p, const Tensor& g, double delta, double eps = 1e-7);

// Mean binary cross entropy with probabilities clamped to [eps, 1-eps].
ag::Var bce(const ag::Var& p, const Tensor& g, double eps = 1e-7);

// lambda_loc * (1 - mTI_delta) + (1 - lambda_loc) * BCE, averaged over batch.
ag::Var loc_supervised_loss(const ag::Var& p, const Tensor& g, const LossConfig& cfg);

// Modified asymmetric focal loss; rare classes are all channels != 0.
ag::Var asym_focal(const ag::Var& p, const Tensor& g, double delta, double vartheta,
                   double eps = 1e-7);

// Modified asymmetric focal Tversky loss.
ag::Var asym_focal_tversky(const ag::Var& p, const Tensor& g, double delta, double vartheta,
                           double eps = 1e-7);

// lambda_seg * maF + (1 - lambda_seg) * maFT.
ag::Var seg_supervised_loss(const ag::Var& p, const Tensor& g, const LossConfig& cfg);

// Validity-masked MSE (Eq.-style): per sample ||v (p_s - p_t)||^2 / sum(v),
// averaged over samples with sum(v) > 0; 0 when no sample is valid.
ag::Var consistency_mse(const ag::Var& p_student, const Tensor& p_teacher_transformed,
                        const Tensor& validity);

// Uncertainty-gated variant: the weight is validity * indicator(u < tau),
// with u (N,1,H,W) broadcast across channels.
ag::Var uncertainty_consistency(const ag::Var& p_student, const Tensor& p_teacher_transformed,
                                const Tensor& validity, const Tensor& u_transformed, double tau);

// Predictive entropy of the mean probability over T stochastic passes.
// Each pass is (C,H,W) with per-pixel simplex probabilities; result is (H,W)
// in nats, bounded by ln C.
Tensor predictive_entropy(const std::vector<Tensor>& prob_stack);

// [1-p, p] expansion for single-channel sigmoid outputs.
Tensor expand_binary_probs(const Tensor& p_1hw);

}  // namespace carotidseg
