#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "carotidseg/eval.hpp"
#include "carotidseg/losses.hpp"
#include "carotidseg/manifest.hpp"
#include "carotidseg/nets.hpp"
#include "carotidseg/prior.hpp"
#include "carotidseg/transforms.hpp"

namespace carotidseg {

enum class Task { localization, segmentation };
enum class SslMode { off, owc, owc_uncertainty };

std::string to_string(Task t);
std::string to_string(SslMode m);
Task task_from_string(const std::string& s);
SslMode ssl_mode_from_string(const std::string& s);

struct TrainConfig {
  Task task = Task::localization;
  double lr = 1e-4;            // 1e-5 for fine segmentation
  double weight_decay = 1e-4;  // 5e-4 for fine segmentation
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  int max_epochs = 120;
  int patience = 20;  // 40 for fine segmentation
  double lr_factor = 0.1;
  int lr_patience = 10;
  int batch_labeled = 4;
  int batch_unlabeled = 4;  // 1:1 labeled:unlabeled composition
  SslMode ssl_mode = SslMode::off;
  int t_mc = 8;
  double ema_alpha = 0.999;
  double mc_noise_std = 0.05;
  bool augment_labeled = true;
  double aug_rotation_deg = 15.0;
  std::uint64_t seed = 0;

  void validate() const;
  static TrainConfig loc_defaults();
  static TrainConfig seg_defaults();
};

struct TrainRun {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  PriorConfig prior;
  PerturbationPolicy policy;
};

struct Sample {
  Tensor images;  // (m,H,W)
  std::optional<SegmentationMask> mask;
  std::string id;
};

struct SampleSet {
  std::vector<Sample> labeled, unlabeled;
};

// Loads and preprocesses every slice of the listed patients. Masks are
// collapsed to the model's class scheme (n_classes 1 -> binary foreground).
SampleSet collect_samples(const DatasetManifest& m, const std::vector<std::string>& patient_ids,
                          int n_classes);

struct StepMetrics {
  double total = 0.0, sup = 0.0, con = 0.0, prior = 0.0;
  double lambda_t = 0.0, tau_t = 0.0;
};

// Optional capture of the consistency inputs of a step (test/verification aid).
struct StepDebug {
  bool captured = false;
  Tensor p_student, p_teacher_transformed, validity;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// MC-dropout uncertainty: T stochastic teacher passes with encoder dropout and
// additive Gaussian input noise; returns per-sample predictive entropy (N,1,H,W).
Tensor estimate_uncertainty(Model& teacher, const Tensor& batch, int t_mc, double noise_std,
                            Rng& rng);

// No-grad forward in minibatches; returns (N,C,H,W) probabilities.
Tensor predict_probs(Model& model, const Tensor& batch, int minibatch = 8);

// Hard mask from probabilities: sigmoid threshold at 0.5 (C==1) or argmax.
SegmentationMask probs_to_mask(const Tensor& probs_chw);

// One-way consistency student-teacher trainer: the student sees perturbed
// inputs, the teacher clean inputs; gradients flow into the student only and
// the teacher tracks the student by EMA.
class SslTrainer {
 public:
  SslTrainer(const TrainRun& run, std::int64_t steps_per_epoch);

  StepMetrics train_step(const std::vector<const Sample*>& labeled,
                         const std::vector<const Sample*>& unlabeled);

  Model& student() { return student_; }
  Model& teacher() { return teacher_; }
  std::int64_t global_step() const { return step_; }
  double epoch_time() const;  // fractional epochs, drives lambda(t)/tau(t)
  double current_lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  void save_state(const std::filesystem::path& path,
                  const std::map<std::string, std::string>& extra = {}) const;
  void load_state(const std::filesystem::path& path,
                  std::map<std::string, std::string>* extra_out = nullptr);

  Rng& data_rng() { return data_rng_; }
  Rng& unlabeled_rng() { return unlabeled_rng_; }
  void set_debug_capture(StepDebug* dbg) { debug_ = dbg; }

 private:
  struct Adam {
    std::vector<Tensor> m, v;
    std::int64_t t = 0;
  };

  Tensor build_supervised_batch(const std::vector<const Sample*>& labeled, Tensor& targets);
  ag::Var supervised_loss(const ag::Var& probs, const Tensor& targets);
  void adam_step();

  TrainRun run_;
  Model student_, teacher_;
  Adam adam_;
  double lr_;
  std::int64_t step_ = 0;
  std::int64_t steps_per_epoch_;
  Rng data_rng_, unlabeled_rng_, aug_rng_, perturb_rng_, mc_rng_;
  StepDebug* debug_ = nullptr;
};

struct TrainResult {
  std::vector<HistoryRecord> history;
  double best_val_dice = 0.0;
  int best_epoch = -1;
  int stopped_epoch = 0;
  std::filesystem::path best_checkpoint, last_checkpoint, history_file;
};

// Full epoch loop with patient-wise pools, dynamic labeled augmentation,
// ReduceLROnPlateau scheduling, early stopping, best/last checkpoints and an
// append-only JSONL history. Resumes bit-identically from last.ckpt when
// `resume` is set and the file exists.
TrainResult train(const TrainRun& run, const DatasetManifest& manifest,
                  const std::vector<std::string>& train_ids,
                  const std::vector<std::string>& val_ids, const std::filesystem::path& out_dir,
                  bool resume = false);

// Mean foreground Dice of `model` over the labeled slices of the given ids.
double evaluate_dice(Model& model, const DatasetManifest& manifest,
                     const std::vector<std::string>& ids);

struct FoldResult {
  int fold = 0;
  double val_dice = 0.0;
  std::vector<std::string> val_patients;
};

struct CvResult {
  std::vector<FoldResult> folds;
  double mean_val_dice = 0.0;
};

CvResult cross_validate(const TrainRun& run, const DatasetManifest& manifest, int k,
                        const std::filesystem::path& out_dir);

}  // namespace carotidseg
