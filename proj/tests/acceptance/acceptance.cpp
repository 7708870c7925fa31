// Acceptance harness: each criterion prints one [PASS]/[FAIL] line with the
// measured quantities. Run a single criterion with --only N (repeatable).
// End-to-end criteria are sized for a single CPU core; epochs and dataset
// sizes can be scaled through CAROTIDSEG_ACCEPT_EPOCH_SCALE (float, default 1).

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "carotidseg/checkpoint.hpp"
#include "carotidseg/config.hpp"
#include "carotidseg/eval.hpp"
#include "carotidseg/losses.hpp"
#include "carotidseg/pipeline.hpp"
#include "carotidseg/preprocess.hpp"
#include "carotidseg/prior.hpp"
#include "carotidseg/synth.hpp"
#include "carotidseg/trainer.hpp"
#include "carotidseg/transforms.hpp"
#include "helpers.hpp"

using namespace carotidseg;
namespace fs = std::filesystem;
using testref::fd_gradient;
using testref::max_rel_error;
using testref::random_onehot;
using testref::random_tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

double epoch_scale() {
  if (const char* s = std::getenv("CAROTIDSEG_ACCEPT_EPOCH_SCALE")) return std::atof(s);
  return 1.0;
}

int scaled_epochs(int base) { return std::max(1, static_cast<int>(std::lround(base * epoch_scale()))); }

fs::path work_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("cseg_accept_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string fmt(double v, int prec = 4) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

bool require(Outcome& o, bool cond, const std::string& what) {
  if (!cond) {
    o.pass = false;
    o.detail += (o.detail.empty() ? "" : "; ") + what;
  }
  return cond;
}

// ---------------------------------------------------------------------------
// 1. loss oracle suite
// ---------------------------------------------------------------------------

Outcome criterion1() {
  Outcome o;
  Rng rng(101);

  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::int64_t n = 8 + rng.uniform_int(0, 24);
    Tensor p({n}), g({n});
    for (std::int64_t k = 0; k < n; ++k) {
      p[k] = static_cast<float>(rng.uniform(0.0, 1.0));
      g[k] = rng.bernoulli(0.4) ? 1.0f : 0.0f;
    }
    double delta = rng.uniform(0.1, 0.9);
    // brute-force TP/FP/FN counting, double precision
    double tp = 0, fn = 0, fp = 0;
    for (std::int64_t k = 0; k < n; ++k) {
      tp += static_cast<double>(g[k]) * p[k];
      fn += static_cast<double>(g[k]) * (1.0 - p[k]);
      fp += (1.0 - g[k]) * p[k];
    }
    double denom = std::max(1e-7, tp + delta * fn + (1 - delta) * fp);
    worst = std::max(worst, std::abs(modified_tversky_value(p, g, delta) - tp / denom));
  }
  require(o, worst < 1e-9, "mTI vs count oracle, worst " + fmt(worst, 12));

  double worst_dice = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Tensor p({30}), g({30});
    for (std::int64_t k = 0; k < 30; ++k) {
      p[k] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
      g[k] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
    }
    double tp = 0, fp = 0, fn = 0;
    for (std::int64_t k = 0; k < 30; ++k) {
      if (p[k] == 1 && g[k] == 1) ++tp;
      if (p[k] == 1 && g[k] == 0) ++fp;
      if (p[k] == 0 && g[k] == 1) ++fn;
    }
    if (tp + fp + fn == 0) continue;
    double dice = 2 * tp / (2 * tp + fp + fn);
    worst_dice = std::max(worst_dice, std::abs(modified_tversky_value(p, g, 0.5) - dice));
  }
  require(o, worst_dice < 1e-9, "mTI(0.5) vs Dice, worst " + fmt(worst_dice, 12));

  // worked examples, frozen from direct evaluation, 4 decimals
  auto close4 = [&](double got, double want, const char* name) {
    require(o, std::abs(got - want) < 5e-5, std::string(name) + " got " + fmt(got));
  };
  {
    Tensor p({4}), g({4});
    p[0] = p[1] = 1.0f;
    g[0] = 1.0f;
    close4(modified_tversky_value(p, g, 0.7), 0.76923, "mTI hand example");
  }
  close4(rampup_weight(0, 60, 10), 0.06738, "lambda(0)");
  close4(rampup_weight(60, 60, 10), 10.0, "lambda(R)");
  {
    LossConfig cfg = LossConfig::loc_defaults();
    close4(uncertainty_threshold(0, cfg), 0.52102, "tau(0)");
    close4(uncertainty_threshold(60, cfg), std::log(2.0), "tau(R)");
  }
  {
    Tensor p({1, 1, 1, 1}, 0.25f), g({1, 1, 1, 1}, 1.0f);
    close4(bce(ag::constant(p), g).value()[0], 1.38629, "bce single pixel");
  }
  {
    Tensor p({1, 2, 1, 1}), g({1, 2, 1, 1});
    p[0] = p[1] = 0.5f;
    g[0] = 1.0f;
    close4(asym_focal(ag::constant(p), g, 0.6, 0.25).value()[0], 0.23314, "asym focal bg pixel");
  }
  close4(std::pow(1.0 - 1.0 / 1.3, 0.75), 0.33295, "focal-tversky rare contribution");
  {
    Tensor a({2, 1, 1}), b({2, 1, 1});
    a[0] = 1.0f;
    b[1] = 1.0f;
    close4(predictive_entropy({a, b})[0], 0.69315, "entropy of split passes");
  }
  return o;
}

// ---------------------------------------------------------------------------
// 2. gradient checks
// ---------------------------------------------------------------------------

Outcome criterion2() {
  Outcome o;
  Rng rng(202);
  LossConfig loc_cfg = LossConfig::loc_defaults();
  LossConfig seg_cfg = LossConfig::seg_defaults();

  auto check = [&](const char* name, const Tensor& p0,
                   const std::function<ag::Var(const ag::Var&)>& loss,
                   const std::function<double(const Tensor&)>& ref) {
    ag::Var p = ag::leaf(p0);
    ag::backward(loss(p));
    double err = max_rel_error(fd_gradient(ref, p0, 1e-4), p.grad());
    require(o, err < 1e-4, std::string(name) + " rel err " + fmt(err, 7));
  };

  for (int rep = 0; rep < 3; ++rep) {
    {
      Tensor p0 = random_tensor({1, 1, 4, 4}, rng, 0.1, 0.9);
      Tensor g = random_onehot({1, 1, 4, 4}, rng);
      check("loc_supervised", p0,
            [&](const ag::Var& v) { return loc_supervised_loss(v, g, loc_cfg); },
            [&](const Tensor& t) {
              return testref::ref_loc_supervised(t, g, loc_cfg.lambda_loc, loc_cfg.delta_loc,
                                                 loc_cfg.eps);
            });
    }
    {
      Tensor p0 = random_tensor({1, 3, 4, 4}, rng, 0.1, 0.9);
      Tensor g = random_onehot({1, 3, 4, 4}, rng);
      check("seg_supervised", p0,
            [&](const ag::Var& v) { return seg_supervised_loss(v, g, seg_cfg); },
            [&](const Tensor& t) {
              return seg_cfg.lambda_seg *
                         testref::ref_asym_focal(t, g, seg_cfg.delta_seg, seg_cfg.vartheta) +
                     (1 - seg_cfg.lambda_seg) *
                         testref::ref_asym_focal_tversky(t, g, seg_cfg.delta_seg, seg_cfg.vartheta);
            });
    }
    {
      Tensor p0 = random_tensor({2, 2, 4, 4}, rng, 0.1, 0.9);
      Tensor pt = random_tensor({2, 2, 4, 4}, rng, 0.1, 0.9);
      Tensor v({2, 2, 4, 4});
      for (std::int64_t i = 0; i < v.numel(); ++i) v[i] = rng.bernoulli(0.8) ? 1.0f : 0.0f;
      check("consistency_mse", p0,
            [&](const ag::Var& var) { return consistency_mse(var, pt, v); },
            [&](const Tensor& t) { return testref::ref_weighted_consistency(t, pt, v); });

      Tensor u = random_tensor({2, 1, 4, 4}, rng, 0.0, 0.7);
      double tau = 0.5;
      check("uncertainty_consistency", p0,
            [&](const ag::Var& var) { return uncertainty_consistency(var, pt, v, u, tau); },
            [&](const Tensor& t) {
              Tensor w = v;
              for (std::int64_t n = 0; n < 2; ++n)
                for (std::int64_t i = 0; i < 16; ++i)
                  if (u[n * 16 + i] >= tau)
                    for (int c = 0; c < 2; ++c) w[(n * 2 + c) * 16 + i] = 0.0f;
              return testref::ref_weighted_consistency(t, pt, w);
            });
    }
    {
      // prior symmetry term (count term carries no gradient by design)
      PriorConfig pcfg;
      pcfg.max_row_diff = 1;
      Tensor p0({1, 1, 4, 4});
      for (std::int64_t i = 0; i < 16; ++i) p0[i] = static_cast<float>(rng.uniform(0.05, 0.45));
      p0.at(0, 0, 0, 0) = 0.9f;
      p0.at(0, 0, 3, 3) = 0.9f;
      check("prior_symmetry", p0,
            [&](const ag::Var& v) { return prior_loss(v, pcfg); },
            [&](const Tensor& t) {
              double ml = 0, mr = 0, rl = 0, rr = 0;
              for (std::int64_t r = 0; r < 4; ++r)
                for (std::int64_t c = 0; c < 4; ++c) {
                  double val = t[r * 4 + c];
                  if (c < 2) {
                    ml += val;
                    rl += val * static_cast<double>(r);
                  } else {
                    mr += val;
                    rr += val * static_cast<double>(r);
                  }
                }
              return std::max(0.0, std::abs(rl / ml - rr / mr) - pcfg.max_row_diff) / 4.0;
            });
    }
  }
  return o;
}

// ---------------------------------------------------------------------------
// 3. schedule exactness
// ---------------------------------------------------------------------------

Outcome criterion3() {
  Outcome o;
  for (auto [R, k] : {std::pair{60.0, 10.0}, {40.0, 20.0}}) {
    require(o, rampup_weight(0, R, k) == k * std::exp(-5.0), "lambda(0) = k e^-5 exactly");
    require(o, rampup_weight(R, R, k) == k, "lambda(R) = k exactly");
    require(o, rampup_weight(10 * R, R, k) == k, "lambda clamps past R");
    double prev = -1;
    bool mono = true;
    for (double t = 0; t <= 2 * R; t += 0.25) {
      double w = rampup_weight(t, R, k);
      mono &= w >= prev;
      prev = w;
    }
    require(o, mono, "lambda monotone");
  }
  LossConfig cfg = LossConfig::loc_defaults();
  double ln2 = std::log(2.0);
  require(o, uncertainty_threshold(0, cfg) == ln2 * (0.75 + std::exp(-5.0) / 4.0), "tau(0) exact");
  require(o, uncertainty_threshold(cfg.rampup_R, cfg) == ln2, "tau(R) = ln 2 exact");
  bool tau_mono = true;
  double prev = 0;
  for (double t = 0; t <= 2 * cfg.rampup_R; t += 0.5) {
    double tau = uncertainty_threshold(t, cfg);
    tau_mono &= tau >= prev && tau >= 0.75 * ln2 - 1e-15 && tau <= ln2 + 1e-15;
    prev = tau;
  }
  require(o, tau_mono, "tau spans [0.75 ln2, ln2] monotonically");

  // EMA geometric convergence on a scalar parameter store
  ParamStore teacher, student;
  teacher.add("w", Tensor({1}, 1.0f));
  student.add("w", Tensor({1}, 0.0f));
  double alpha = 0.999;
  double worst = 0.0;
  for (int t = 1; t <= 50; ++t) {
    ema_update(teacher, student, alpha);
    double want = std::pow(alpha, t);
    worst = std::max(worst, std::abs(teacher.items[0].var.value()[0] - want) / want);
  }
  require(o, worst < 1e-5, "EMA geometric convergence, worst rel " + fmt(worst, 8));
  return o;
}

// ---------------------------------------------------------------------------
// 4. reduction property (photometric-only consistency == plain MSE)
// ---------------------------------------------------------------------------

Outcome criterion4() {
  Outcome o;
  TrainRun run;
  run.model.n_sequences = 2;
  run.model.depth = 2;
  run.model.base_channels = 4;
  run.model.fusion = ModelConfig::Fusion::input;
  run.model.use_se = false;
  run.model.use_deep_supervision = false;
  run.model.dropout_rate = 0.2;
  run.model.n_classes = 1;
  run.train = TrainConfig::seg_defaults();
  run.train.task = Task::segmentation;
  run.train.lr = 1e-3;
  run.train.batch_labeled = 2;
  run.train.batch_unlabeled = 2;
  run.train.ssl_mode = SslMode::owc;
  run.train.seed = 404;
  run.loss = LossConfig::seg_defaults();
  run.policy.disable_geometric();

  Rng rng(404);
  std::vector<Sample> labeled, unlabeled;
  for (int i = 0; i < 4; ++i) {
    Sample s;
    s.id = "l" + std::to_string(i);
    s.images = random_tensor({2, 16, 16}, rng);
    Tensor lm({16, 16});
    for (std::int64_t r = 5; r < 9; ++r)
      for (std::int64_t c = 3; c < 7; ++c) lm.at(r, c) = 1.0f;
    s.mask = SegmentationMask::from_label_map(lm, ClassScheme::binary);
    labeled.push_back(std::move(s));
    Sample u;
    u.id = "u" + std::to_string(i);
    u.images = random_tensor({2, 16, 16}, rng);
    unlabeled.push_back(std::move(u));
  }

  SslTrainer trainer(run, 2);
  StepDebug dbg;
  trainer.set_debug_capture(&dbg);
  double worst = 0.0;
  for (int step = 0; step < 50; ++step) {
    std::vector<const Sample*> lb{&labeled[step % 4], &labeled[(step + 1) % 4]};
    std::vector<const Sample*> ub{&unlabeled[step % 4], &unlabeled[(step + 3) % 4]};
    StepMetrics sm = trainer.train_step(lb, ub);
    if (!dbg.captured) {
      require(o, false, "consistency inputs not captured");
      break;
    }
    if (dbg.validity.sum() != static_cast<double>(dbg.validity.numel())) {
      require(o, false, "validity mask not all ones with geometric disabled");
      break;
    }
    double mse = 0;
    for (std::int64_t i = 0; i < dbg.p_student.numel(); ++i) {
      double d = static_cast<double>(dbg.p_student[i]) - dbg.p_teacher_transformed[i];
      mse += d * d;
    }
    mse /= static_cast<double>(dbg.p_student.numel());
    worst = std::max(worst, std::abs(sm.con - mse));
  }
  require(o, worst < 1e-7, "max |consistency - MSE| = " + fmt(worst, 10));
  o.detail = "max |consistency - MSE| = " + fmt(worst, 10) + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ---------------------------------------------------------------------------
// 5. equivariance for support-preserving transforms
// ---------------------------------------------------------------------------

Outcome criterion5() {
  Outcome o;
  Rng rng(505);
  std::int64_t H = 16, W = 16;
  Tensor x = random_tensor({1, H, W}, rng);

  // pointwise mock model commuting with any pixel permutation; outputs are
  // exactly representable so bit-exact zero is achievable
  auto mock = [&](const Tensor& img) {
    Tensor p({2, H, W});
    for (std::int64_t i = 0; i < H * W; ++i) {
      float q = img[i] >= 0.5f ? 0.75f : 0.25f;
      p[i] = q;
      p[H * W + i] = 1.0f - q;
    }
    return p;
  };

  std::vector<GeometricParams> gammas;
  for (double deg : {0.0, 90.0, 180.0, 270.0})
    for (bool flip : {false, true}) {
      GeometricParams g;
      g.rotation_deg = deg;
      g.flip_h = flip;
      gammas.push_back(g);
    }

  for (const auto& g : gammas) {
    Tensor v = validity_mask(g, H, W, 2);
    if (!require(o, v.sum() == static_cast<double>(2 * H * W), "validity mask all ones")) continue;

    Tensor teacher_probs = mock(x);
    Tensor teacher_t = transform_probability_map(teacher_probs, g);
    Tensor x_warp3 = apply_geometric(x, g, Interp::bilinear);
    Tensor student_probs = mock(x_warp3);

    ag::Var ps = ag::constant(student_probs.reshaped({1, 2, H, W}));
    double con = consistency_mse(ps, teacher_t.reshaped({1, 2, H, W}),
                                 v.reshaped({1, 2, H, W})).value()[0];
    require(o, con == 0.0,
            "consistency exactly 0 for rot=" + fmt(g.rotation_deg, 0) +
                " flip=" + std::to_string(g.flip_h) + " (got " + fmt(con, 12) + ")");
  }
  return o;
}

// ---------------------------------------------------------------------------
// shared phantom/ROI helpers for the e2e criteria
// ---------------------------------------------------------------------------

DatasetManifest phantom_dataset(const fs::path& dir, int patients, int slices, std::int64_t size,
                                double distractor_rate, double labeled_fraction,
                                std::uint64_t seed) {
  PhantomSpec spec;
  spec.n_patients = patients;
  spec.slices_per_patient = slices;
  spec.height = spec.width = size;
  spec.distractor_rate = distractor_rate;
  spec.labeled_fraction = labeled_fraction;
  spec.plaque_probability = 0.7;
  spec.seed = seed;
  return generate_phantom(spec, dir);
}

// ROI dataset cropped at ground-truth side centroids (fine-segmentation input
// decoupled from the localization model). Unlabeled slices also get crops so
// SSL has a pool; their centers fall back to the centroids of the patient's
// first labeled slice.
DatasetManifest gt_roi_dataset(const DatasetManifest& src, const fs::path& out_dir, int roi) {
  DatasetManifest dst;
  dst.base_dir = out_dir;
  dst.sequence_names = src.sequence_names;
  dst.class_scheme = src.class_scheme;
  fs::create_directories(out_dir);

  for (const auto& patient : src.patients) {
    auto slices = load_patient_slices(src, patient.id, true);
    // fallback centers: area centroid per side of the first labeled slice
    double fb_row[2] = {0, 0}, fb_col[2] = {0, 0};
    bool have_fb = false;
    for (const auto& sl : slices) {
      if (!sl.mask) continue;
      Tensor fg = sl.mask->foreground();
      PriorFilterResult fr = prior_filter(fg, PriorConfig{});
      if (fr.left.detected && fr.right.detected && !have_fb) {
        fb_row[0] = fr.left.center_row;
        fb_col[0] = fr.left.center_col;
        fb_row[1] = fr.right.center_row;
        fb_col[1] = fr.right.center_col;
        have_fb = true;
      }
    }
    if (!have_fb) continue;

    struct Stack {
      std::vector<MultiSequenceSlice> rois;
      std::vector<int> labeled;
    } stacks[2];
    for (const auto& sl : slices) {
      double row[2] = {fb_row[0], fb_row[1]}, col[2] = {fb_col[0], fb_col[1]};
      if (sl.mask) {
        PriorFilterResult fr = prior_filter(sl.mask->foreground(), PriorConfig{});
        if (fr.left.detected) {
          row[0] = fr.left.center_row;
          col[0] = fr.left.center_col;
        }
        if (fr.right.detected) {
          row[1] = fr.right.center_row;
          col[1] = fr.right.center_col;
        }
      }
      for (int side = 0; side < 2; ++side) {
        auto cr = static_cast<std::int64_t>(std::llround(row[side]));
        auto cc = static_cast<std::int64_t>(std::llround(col[side]));
        MultiSequenceSlice crop = extract_roi(sl, {cr, cc}, {roi, roi});
        if (crop.mask) stacks[side].labeled.push_back(static_cast<int>(stacks[side].rois.size()));
        stacks[side].rois.push_back(std::move(crop));
      }
    }
    for (int side = 0; side < 2; ++side) {
      auto& st = stacks[side];
      if (st.rois.empty()) continue;
      std::string suffix = side == 0 ? "L" : "R";
      std::string dir_rel = patient.id + "_" + suffix;
      fs::create_directories(out_dir / dir_rel);
      PatientEntry entry;
      entry.id = patient.id + "/" + suffix;
      std::int64_t K = static_cast<std::int64_t>(st.rois.size());
      for (std::size_t j = 0; j < dst.sequence_names.size(); ++j) {
        Volume v = Volume::zeros(K, roi, roi);
        for (std::int64_t k = 0; k < K; ++k) v.set_slice(k, st.rois[static_cast<std::size_t>(k)].images[j]);
        std::string rel = dir_rel + "/" + dst.sequence_names[j] + ".rvol";
        save_volume(v, out_dir / rel);
        entry.volumes[dst.sequence_names[j]] = rel;
      }
      entry.labeled_slices = st.labeled;
      if (!st.labeled.empty()) {
        Volume mv = Volume::zeros(K, roi, roi);
        for (int k : st.labeled)
          mv.set_slice(k, st.rois[static_cast<std::size_t>(k)].mask->to_label_map());
        std::string rel = dir_rel + "/mask.rvol";
        save_volume(mv, out_dir / rel);
        entry.mask = rel;
      }
      dst.patients.push_back(std::move(entry));
    }
  }
  save_manifest(dst, out_dir / "manifest.json");
  return load_manifest(out_dir / "manifest.json");
}

TrainRun fine_run(ModelConfig::Fusion fusion, int n_classes, SslMode ssl, std::uint64_t seed,
                  int epochs) {
  TrainRun run;
  run.model = ModelConfig::fine_defaults();
  run.model.depth = 3;
  run.model.base_channels = 8;
  run.model.fusion = fusion;
  run.model.n_classes = n_classes;
  run.model.dropout_rate = 0.1;
  run.train = TrainConfig::seg_defaults();
  run.train.lr = 2e-3;
  run.train.max_epochs = epochs;
  run.train.patience = epochs;
  run.train.batch_labeled = 6;
  run.train.batch_unlabeled = 6;
  run.train.ssl_mode = ssl;
  run.train.t_mc = 4;
  run.train.seed = seed;
  run.loss = LossConfig::seg_defaults();
  run.loss.rampup_R = std::max(2.0, epochs * 0.5);
  return run;
}

std::vector<std::string> ids_of(const DatasetManifest& m, int lo, int hi) {
  std::set<std::string> groups;
  for (const auto& p : m.patients) groups.insert(split_group_of(p.id));
  std::vector<std::string> sorted(groups.begin(), groups.end());
  std::vector<std::string> out;
  for (int i = lo; i < hi && i < static_cast<int>(sorted.size()); ++i)
    for (const auto& p : m.patients)
      if (split_group_of(p.id) == sorted[static_cast<std::size_t>(i)]) out.push_back(p.id);
  return out;
}

// ---------------------------------------------------------------------------
// 6. phantom end-to-end localization
// ---------------------------------------------------------------------------

Outcome criterion6() {
  Outcome o;
  fs::path dir = work_dir("c6");
  DatasetManifest data = phantom_dataset(dir / "data", 20, 4, 96, 0.5, 1.0, 606);

  TrainRun run;
  run.model = ModelConfig::coarse_defaults();
  run.model.base_channels = 8;
  run.model.fusion = ModelConfig::Fusion::input;
  run.model.dropout_rate = 0.1;
  run.train = TrainConfig::loc_defaults();
  run.train.lr = 2e-3;
  run.train.max_epochs = scaled_epochs(16);
  run.train.patience = run.train.max_epochs;
  run.train.batch_labeled = 4;
  run.train.ssl_mode = SslMode::off;
  run.train.seed = 606;
  run.loss = LossConfig::loc_defaults();

  std::vector<std::string> train_ids = ids_of(data, 0, 16);
  std::vector<std::string> val_ids = ids_of(data, 16, 16);  // none; select by train behavior
  std::vector<std::string> held_out = ids_of(data, 16, 20);
  // use one training patient as validation so best-checkpoint selection works
  val_ids = {train_ids.back()};
  train_ids.pop_back();

  TrainResult tr = train(run, data, train_ids, val_ids, dir / "run");
  Model best = load_model_checkpoint(tr.best_checkpoint);

  PriorConfig prior_cfg;
  std::vector<DetectionRecord> with_filter, without_filter;
  for (const auto& pid : held_out) {
    for (auto& slice : load_patient_slices(data, pid, true)) {
      if (!slice.mask) continue;
      std::int64_t m = slice.n_sequences(), H = slice.height(), W = slice.width();
      Tensor batch({1, m, H, W});
      for (std::int64_t j = 0; j < m; ++j)
        std::copy_n(slice.images[static_cast<std::size_t>(j)].data(), H * W,
                    batch.data() + j * H * W);
      Tensor probs = predict_probs(best, batch);
      Tensor prob_hw({H, W});
      std::copy_n(probs.data(), H * W, prob_hw.data());
      Tensor fg = slice.mask->foreground();
      std::string sid = pid + ":" + std::to_string(slice.slice_index);
      for (bool use_filter : {true, false}) {
        SliceCenters sc = slice_centers(prob_hw, prior_cfg, use_filter);
        DetectionRecord rec;
        rec.slice_id = sid;
        rec.left_detected = side_detected(fg, true, sc.left_ok, sc.left_row, sc.left_col);
        rec.right_detected = side_detected(fg, false, sc.right_ok, sc.right_row, sc.right_col);
        (use_filter ? with_filter : without_filter).push_back(rec);
      }
    }
  }
  DetectionSummary filt = detection_rate(with_filter);
  DetectionSummary raw = detection_rate(without_filter);
  o.detail = "detection rate with prior " + fmt(filt.rate) + " (" +
             std::to_string(filt.n_failed) + "/" + std::to_string(filt.n_total) +
             " failed), without prior " + fmt(raw.rate);
  require(o, filt.rate >= 0.95, "detection rate with prior_filter >= 0.95");
  require(o, filt.rate >= raw.rate, "prior_filter improves or ties detection");
  return o;
}

// ---------------------------------------------------------------------------
// 7. phantom end-to-end fine segmentation
// ---------------------------------------------------------------------------

Outcome criterion7() {
  Outcome o;
  fs::path dir = work_dir("c7");
  DatasetManifest data = phantom_dataset(dir / "data", 20, 3, 96, 0.3, 1.0, 707);
  DatasetManifest roi = gt_roi_dataset(data, dir / "roi", 64);

  std::vector<std::string> train_ids = ids_of(roi, 0, 14);
  std::vector<std::string> val_ids = ids_of(roi, 14, 16);
  std::vector<std::string> test_ids = ids_of(roi, 16, 20);

  int epochs = scaled_epochs(20);
  {
    TrainRun run = fine_run(ModelConfig::Fusion::bottleneck, 1, SslMode::off, 707, epochs);
    TrainResult tr = train(run, roi, train_ids, val_ids, dir / "binary");
    Model best = load_model_checkpoint(tr.best_checkpoint);
    EvalResult ev = evaluate_model(best, roi, test_ids);
    double dice = ev.report.per_class[1].dice;
    o.detail = "binary held-out Dice " + fmt(dice);
    require(o, dice >= 0.85, "binary Dice >= 0.85 (got " + fmt(dice) + ")");
    require(o, tr.stopped_epoch < 40, "converged within 40 epochs");
  }
  {
    TrainRun run = fine_run(ModelConfig::Fusion::bottleneck, 3, SslMode::off, 708, epochs);
    TrainResult tr = train(run, roi, train_ids, val_ids, dir / "multiclass");
    Model best = load_model_checkpoint(tr.best_checkpoint);
    EvalResult ev = evaluate_model(best, roi, test_ids);
    double macro = ev.report.macro.dice;
    o.detail += ", multiclass held-out macro Dice " + fmt(macro);
    require(o, macro >= 0.75, "multiclass macro Dice >= 0.75 (got " + fmt(macro) + ")");
  }
  return o;
}

// ---------------------------------------------------------------------------
// 8. SSL ablation
// ---------------------------------------------------------------------------

Outcome criterion8() {
  Outcome o;
  fs::path dir = work_dir("c8");
  // 25% of slices labeled, the rest unlabeled
  DatasetManifest data = phantom_dataset(dir / "data", 16, 4, 96, 0.3, 0.25, 808);
  DatasetManifest roi = gt_roi_dataset(data, dir / "roi", 64);

  std::vector<std::string> train_ids = ids_of(roi, 0, 11);
  std::vector<std::string> val_ids = ids_of(roi, 11, 12);
  std::vector<std::string> test_ids = ids_of(roi, 12, 16);

  int epochs = scaled_epochs(12);
  auto mean_dice = [&](SslMode mode) {
    double acc = 0.0;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
      TrainRun run = fine_run(ModelConfig::Fusion::bottleneck, 1, mode, 800 + seed, epochs);
      run.loss.rampup_R = epochs * 0.4;
      fs::path out = dir / (to_string(mode) + "_s" + std::to_string(seed));
      TrainResult tr = train(run, roi, train_ids, val_ids, out);
      Model best = load_model_checkpoint(tr.best_checkpoint);
      acc += evaluate_model(best, roi, test_ids).report.per_class[1].dice;
    }
    return acc / 3.0;
  };

  double sup = mean_dice(SslMode::off);
  double owc = mean_dice(SslMode::owc);
  double unc = mean_dice(SslMode::owc_uncertainty);
  o.detail = "mean held-out Dice over 3 seeds: supervised " + fmt(sup) + ", owc " + fmt(owc) +
             ", owc+uncertainty " + fmt(unc);
  require(o, owc >= sup - 0.01, "owc >= supervised - 0.01");
  require(o, unc >= owc - 0.01, "owc+uncertainty >= owc - 0.01");
  return o;
}

// ---------------------------------------------------------------------------
// 9. fusion harness (one CLI command, four-row table)
// ---------------------------------------------------------------------------

Outcome criterion9() {
  Outcome o;
  const char* cli = std::getenv("CAROTIDSEG_CLI");
  if (!require(o, cli != nullptr, "CAROTIDSEG_CLI not set")) return o;

  fs::path dir = work_dir("c9");
  DatasetManifest data = phantom_dataset(dir / "data", 12, 3, 96, 0.3, 1.0, 909);
  gt_roi_dataset(data, dir / "roi", 64);

  int epochs = scaled_epochs(10);
  std::ofstream cfg(dir / "run.toml");
  cfg << "[run]\nschema_version = 1\nseed = 9\nout_dir = \"" << (dir / "out").string() << "\"\n"
      << "[data]\nmanifest = \"" << (dir / "roi" / "manifest.json").string() << "\"\n"
      << "[model]\ndepth = 3\nbase_channels = 8\nn_classes = 1\ndropout_rate = 0.1\n"
      << "[train]\ntask = \"segmentation\"\nlr = 0.002\nmax_epochs = " << epochs
      << "\npatience = " << epochs << "\nbatch_labeled = 6\n";
  cfg.close();

  std::string cmd = std::string(cli) + " fusion-table --config " + (dir / "run.toml").string() +
                    " > " + (dir / "stdout.txt").string() + " 2>&1";
  int status = std::system(cmd.c_str());
  if (!require(o, WEXITSTATUS(status) == 0, "fusion-table command exits 0")) {
    o.detail = slurp(dir / "stdout.txt").substr(0, 400);
    return o;
  }

  std::string csv = slurp(dir / "out" / "fusion_table.csv");
  require(o, csv.rfind("Model,Dice,IoU,Precision,Recall\n", 0) == 0,
          "table header matches the four-metric layout");
  int rows = 0;
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  std::string detail;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ++rows;
    detail += (detail.empty() ? "" : " | ") + line;
  }
  require(o, rows == 4, "exactly four rows (got " + std::to_string(rows) + ")");
  o.detail = detail;  // numerical ordering is reported, not asserted
  return o;
}

// ---------------------------------------------------------------------------
// 10. metric identities and detection-rate arithmetic
// ---------------------------------------------------------------------------

Outcome criterion10() {
  Outcome o;
  Rng rng(1010);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Tensor a({6, 6}), b({6, 6});
    for (std::int64_t k = 0; k < 36; ++k) {
      a[k] = rng.bernoulli(0.4) ? 1.0f : 0.0f;
      b[k] = rng.bernoulli(0.4) ? 1.0f : 0.0f;
    }
    MetricsReport r = segmentation_metrics(SegmentationMask::from_label_map(a, ClassScheme::binary),
                                           SegmentationMask::from_label_map(b, ClassScheme::binary));
    for (const auto& c : r.per_class)
      worst = std::max(worst, std::abs(c.dice - 2.0 * c.iou / (1.0 + c.iou)));
  }
  require(o, worst < 1e-12, "dice = 2 iou/(1+iou), worst " + fmt(worst, 14));

  auto rate_for = [](int failed, int total) {
    std::vector<DetectionRecord> recs(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) recs[static_cast<std::size_t>(i)].left_detected = i >= failed,
                                    recs[static_cast<std::size_t>(i)].right_detected = true;
    return detection_rate(recs).rate * 100.0;
  };
  double r1 = rate_for(1, 789), r38 = rate_for(38, 789);
  o.detail = "1/789 -> " + fmt(r1, 2) + "%, 38/789 -> " + fmt(r38, 2) + "%";
  require(o, std::abs(r1 - 99.87) < 0.005, "1/789 reproduces 99.87");
  require(o, std::abs(r38 - 95.18) < 0.005, "38/789 reproduces 95.18");
  return o;
}

// ---------------------------------------------------------------------------
// 11. command determinism
// ---------------------------------------------------------------------------

Outcome criterion11() {
  Outcome o;
  const char* cli = std::getenv("CAROTIDSEG_CLI");
  if (!require(o, cli != nullptr, "CAROTIDSEG_CLI not set")) return o;
  fs::path dir = work_dir("c11");

  auto run_cmd = [&](const std::string& args) {
    std::string cmd = std::string(cli) + " " + args + " >/dev/null 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
  };

  // synth twice
  require(o, run_cmd("synth --patients 3 --slices 2 --size 64 --seed 4 --out " +
                     (dir / "d1").string()) == 0, "synth run 1");
  require(o, run_cmd("synth --patients 3 --slices 2 --size 64 --seed 4 --out " +
                     (dir / "d2").string()) == 0, "synth run 2");
  bool same = true;
  for (auto& entry : fs::recursive_directory_iterator(dir / "d1")) {
    if (!entry.is_regular_file()) continue;
    fs::path rel = fs::relative(entry.path(), dir / "d1");
    same &= slurp(entry.path()) == slurp(dir / "d2" / rel);
  }
  require(o, same, "synth outputs byte-identical");

  // train-loc twice on the same tiny config
  std::ofstream cfg(dir / "run.toml");
  cfg << "[run]\nschema_version = 1\nseed = 6\nout_dir = \"" << (dir / "o1").string() << "\"\n"
      << "[data]\nmanifest = \"" << (dir / "d1" / "manifest.json").string() << "\"\n"
      << "[model]\ndepth = 2\nbase_channels = 2\nfusion = \"input\"\n"
      << "[train]\nmax_epochs = 2\nbatch_labeled = 4\nlr = 0.001\n"
      << "ssl_mode = \"owc+uncertainty\"\nt_mc = 2\n";
  cfg.close();
  require(o, run_cmd("train-loc --config " + (dir / "run.toml").string()) == 0, "train run 1");
  require(o, run_cmd("train-loc --config " + (dir / "run.toml").string() + " --out " +
                     (dir / "o2").string()) == 0, "train run 2");
  require(o, slurp(dir / "o1" / "history.jsonl") == slurp(dir / "o2" / "history.jsonl"),
          "history files byte-identical");
  require(o, slurp(dir / "o1" / "best.ckpt") == slurp(dir / "o2" / "best.ckpt"),
          "best checkpoints byte-identical");
  require(o, slurp(dir / "o1" / "last.ckpt") == slurp(dir / "o2" / "last.ckpt"),
          "last checkpoints byte-identical");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria = {
      {1, {"loss oracle suite", criterion1}},
      {2, {"gradient checks vs central finite differences", criterion2}},
      {3, {"schedule exactness (lambda, tau, EMA)", criterion3}},
      {4, {"photometric-only consistency reduces to plain MSE", criterion4}},
      {5, {"support-preserving equivariance, exact zero consistency", criterion5}},
      {6, {"phantom end-to-end localization with anatomical prior", criterion6}},
      {7, {"phantom end-to-end fine segmentation", criterion7}},
      {8, {"SSL ablation (supervised / owc / owc+uncertainty)", criterion8}},
      {9, {"fusion harness four-row table", criterion9}},
      {10, {"metric identities and detection-rate arithmetic", criterion10}},
      {11, {"command determinism (bit-identical reruns)", criterion11}},
  };

  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      selected.insert(std::atoi(argv[++i]));
    } else {
      std::cerr << "usage: carotidseg_acceptance [--only N]...\n";
      return 2;
    }
  }

  int failures = 0;
  for (const auto& [id, entry] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome out;
    try {
      out = entry.second();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    std::cout << (out.pass ? "[PASS]" : "[FAIL]") << " criterion " << id << ": " << entry.first;
    if (!out.detail.empty()) std::cout << " -- " << out.detail;
    std::cout << std::endl;
    if (!out.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
