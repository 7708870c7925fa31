#include "carotidseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "carotidseg/checkpoint.hpp"
#include "carotidseg/preprocess.hpp"

namespace carotidseg {

using ag::Var;
using json = nlohmann::ordered_json;

std::string to_string(Task t) { return t == Task::localization ? "localization" : "segmentation"; }
std::string to_string(SslMode m) {
  switch (m) {
    case SslMode::off: return "off";
    case SslMode::owc: return "owc";
    default: return "owc+uncertainty";
  }
}

Task task_from_string(const std::string& s) {
  if (s == "localization") return Task::localization;
  if (s == "segmentation") return Task::segmentation;
  throw std::invalid_argument("unknown task '" + s + "' (localization|segmentation)");
}

SslMode ssl_mode_from_string(const std::string& s) {
  if (s == "off") return SslMode::off;
  if (s == "owc") return SslMode::owc;
  if (s == "owc+uncertainty") return SslMode::owc_uncertainty;
  throw std::invalid_argument("unknown ssl_mode '" + s + "' (off|owc|owc+uncertainty)");
}

void TrainConfig::validate() const {
  if (lr <= 0.0 || max_epochs <= 0 || patience <= 0 || lr_patience <= 0)
    throw std::invalid_argument("train: lr/epochs/patience must be positive");
  if (batch_labeled <= 0 || batch_unlabeled < 0)
    throw std::invalid_argument("train: bad batch sizes");
  if (t_mc < 1) throw std::invalid_argument("train: t_mc must be >= 1");
  if (ema_alpha < 0.0 || ema_alpha > 1.0) throw std::invalid_argument("train: ema_alpha in [0,1]");
  if (lr_factor <= 0.0 || lr_factor >= 1.0) throw std::invalid_argument("train: lr_factor in (0,1)");
  if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay >= 0");
}

TrainConfig TrainConfig::loc_defaults() {
  TrainConfig c;
  c.task = Task::localization;
  c.lr = 1e-4;
  c.weight_decay = 1e-4;
  c.patience = 20;
  return c;
}

TrainConfig TrainConfig::seg_defaults() {
  TrainConfig c;
  c.task = Task::segmentation;
  c.lr = 1e-5;
  c.weight_decay = 5e-4;
  c.patience = 40;
  return c;
}

SampleSet collect_samples(const DatasetManifest& m, const std::vector<std::string>& patient_ids,
                          int n_classes) {
  SampleSet set;
  for (const auto& pid : patient_ids) {
    for (auto& slice : load_patient_slices(m, pid, true)) {
      Sample s;
      s.id = pid + ":" + std::to_string(slice.slice_index);
      std::int64_t H = slice.height(), W = slice.width();
      std::int64_t mseq = slice.n_sequences();
      s.images = Tensor({mseq, H, W});
      for (std::int64_t j = 0; j < mseq; ++j)
        std::copy_n(slice.images[static_cast<std::size_t>(j)].data(), H * W,
                    s.images.data() + j * H * W);
      if (slice.mask) {
        if (n_classes <= 2) {
          s.mask = slice.mask->to_binary();
        } else {
          if (slice.mask->n_classes() != n_classes)
            throw std::runtime_error("collect_samples: manifest class scheme has " +
                                     std::to_string(slice.mask->n_classes()) + " classes, model needs " +
                                     std::to_string(n_classes));
          s.mask = *slice.mask;
        }
        set.labeled.push_back(std::move(s));
      } else {
        set.unlabeled.push_back(std::move(s));
      }
    }
  }
  return set;
}

Tensor estimate_uncertainty(Model& teacher, const Tensor& batch, int t_mc, double noise_std,
                            Rng& rng) {
  if (t_mc < 1) throw std::invalid_argument("estimate_uncertainty: t_mc must be >= 1");
  std::int64_t N = batch.dim(0), H = batch.dim(2), W = batch.dim(3);
  std::vector<std::vector<Tensor>> stacks(static_cast<std::size_t>(N));
  ag::NoGradGuard ng;
  for (int t = 0; t < t_mc; ++t) {
    Tensor noisy = batch;
    if (noise_std > 0.0)
      for (std::int64_t i = 0; i < noisy.numel(); ++i)
        noisy[i] += static_cast<float>(rng.normal(0.0, noise_std));
    Tensor probs = teacher.forward(noisy, true, rng.next_u64()).probs.value();
    std::int64_t C = probs.dim(1);
    for (std::int64_t n = 0; n < N; ++n) {
      Tensor p({C, H, W});
      std::copy_n(probs.data() + n * C * H * W, C * H * W, p.data());
      stacks[static_cast<std::size_t>(n)].push_back(
          C == 1 ? expand_binary_probs(p) : std::move(p));
    }
  }
  Tensor u({N, 1, H, W});
  for (std::int64_t n = 0; n < N; ++n) {
    Tensor un = predictive_entropy(stacks[static_cast<std::size_t>(n)]);
    std::copy_n(un.data(), H * W, u.data() + n * H * W);
  }
  return u;
}

Tensor predict_probs(Model& model, const Tensor& batch, int minibatch) {
  ag::NoGradGuard ng;
  std::int64_t N = batch.dim(0), m = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  Tensor out;
  for (std::int64_t n0 = 0; n0 < N; n0 += minibatch) {
    std::int64_t nb = std::min<std::int64_t>(minibatch, N - n0);
    Tensor sub({nb, m, H, W});
    std::copy_n(batch.data() + n0 * m * H * W, nb * m * H * W, sub.data());
    Tensor probs = model.forward(sub, false, 0).probs.value();
    if (out.empty()) out = Tensor({N, probs.dim(1), H, W});
    std::copy_n(probs.data(), probs.numel(), out.data() + n0 * probs.dim(1) * H * W);
  }
  return out;
}

SegmentationMask probs_to_mask(const Tensor& probs_chw) {
  if (probs_chw.rank() != 3) throw std::invalid_argument("probs_to_mask: expected (C,H,W)");
  std::int64_t C = probs_chw.dim(0), H = probs_chw.dim(1), W = probs_chw.dim(2);
  Tensor labels({H, W});
  if (C == 1) {
    for (std::int64_t i = 0; i < H * W; ++i) labels[i] = probs_chw[i] >= 0.5f ? 1.0f : 0.0f;
    return SegmentationMask::from_label_map(labels, ClassScheme::binary);
  }
  for (std::int64_t i = 0; i < H * W; ++i) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < C; ++c)
      if (probs_chw[c * H * W + i] > probs_chw[best * H * W + i]) best = c;
    labels[i] = static_cast<float>(best);
  }
  return SegmentationMask::from_label_map(labels, C == 2 ? ClassScheme::binary : ClassScheme::multiclass);
}

// ---------------------------------------------------------------------------

SslTrainer::SslTrainer(const TrainRun& run, std::int64_t steps_per_epoch)
    : run_(run),
      student_(run.model, derive_seed(run.train.seed, 1)),
      teacher_(Model::clone_of(student_)),
      lr_(run.train.lr),
      steps_per_epoch_(std::max<std::int64_t>(1, steps_per_epoch)),
      data_rng_(derive_seed(run.train.seed, 2)),
      unlabeled_rng_(derive_seed(run.train.seed, 3)),
      aug_rng_(derive_seed(run.train.seed, 4)),
      perturb_rng_(derive_seed(run.train.seed, 5)),
      mc_rng_(derive_seed(run.train.seed, 6)) {
  run_.train.validate();
  run_.policy.validate();
  for (const auto& it : student_.params().items) {
    adam_.m.push_back(Tensor::zeros(it.var.value().dims()));
    adam_.v.push_back(Tensor::zeros(it.var.value().dims()));
  }
}

double SslTrainer::epoch_time() const {
  return static_cast<double>(step_) / static_cast<double>(steps_per_epoch_);
}

Tensor SslTrainer::build_supervised_batch(const std::vector<const Sample*>& labeled,
                                          Tensor& targets) {
  std::int64_t B = static_cast<std::int64_t>(labeled.size());
  std::int64_t m = labeled[0]->images.dim(0), H = labeled[0]->images.dim(1), W = labeled[0]->images.dim(2);
  int C = run_.model.n_classes;
  Tensor x({B, m, H, W});
  targets = Tensor({B, C, H, W});
  for (std::int64_t b = 0; b < B; ++b) {
    const Sample& s = *labeled[static_cast<std::size_t>(b)];
    if (!s.mask) throw std::logic_error("supervised batch requires masks");
    Tensor imgs = s.images;
    SegmentationMask mask = *s.mask;
    if (run_.train.augment_labeled) {
      GeometricParams aug;
      aug.flip_h = aug_rng_.bernoulli(0.5);
      aug.rotation_deg = aug_rng_.uniform(-run_.train.aug_rotation_deg, run_.train.aug_rotation_deg);
      if (!aug.is_identity()) {
        imgs = apply_geometric(imgs, aug, Interp::bilinear);
        mask.data = apply_geometric_mask(mask.data, aug);
      }
    }
    std::copy_n(imgs.data(), m * H * W, x.data() + b * m * H * W);
    if (C == 1) {
      Tensor fg = mask.foreground();
      std::copy_n(fg.data(), H * W, targets.data() + b * H * W);
    } else {
      std::copy_n(mask.data.data(), C * H * W, targets.data() + b * C * H * W);
    }
  }
  return x;
}

namespace {

Var expand_binary_var(const Var& p) {  // (N,1,H,W) -> (N,2,H,W) as [1-p, p]
  return ag::concat_channels({ag::affine(p, -1.0f, 1.0f), p});
}

Tensor expand_binary_target(const Tensor& g) {  // (N,1,H,W) -> (N,2,H,W)
  std::int64_t N = g.dim(0), H = g.dim(2), W = g.dim(3);
  Tensor out({N, 2, H, W});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < H * W; ++i) {
      float v = g[n * H * W + i];
      out[(n * 2) * H * W + i] = 1.0f - v;
      out[(n * 2 + 1) * H * W + i] = v;
    }
  return out;
}

}  // namespace

Var SslTrainer::supervised_loss(const Var& probs, const Tensor& targets) {
  if (run_.train.task == Task::localization)
    return loc_supervised_loss(probs, targets, run_.loss);
  // fine segmentation uses the asymmetric unified focal loss; a sigmoid head
  // is lifted to an explicit two-class simplex first
  if (run_.model.n_classes == 1)
    return seg_supervised_loss(expand_binary_var(probs), expand_binary_target(targets), run_.loss);
  return seg_supervised_loss(probs, targets, run_.loss);
}

StepMetrics SslTrainer::train_step(const std::vector<const Sample*>& labeled,
                                   const std::vector<const Sample*>& unlabeled) {
  if (labeled.empty()) throw std::invalid_argument("train_step: labeled batch is empty");
  const TrainConfig& tc = run_.train;
  double t_epochs = epoch_time();
  StepMetrics metrics;
  metrics.lambda_t = rampup_weight(t_epochs, run_.loss.rampup_R, run_.loss.rampup_k);
  metrics.tau_t = uncertainty_threshold(t_epochs, run_.loss);

  // (6) supervised loss on the unperturbed (input-space) student forward;
  // encoder dropout stays active as in any training pass
  Tensor targets;
  Tensor x_sup = build_supervised_batch(labeled, targets);
  Var p_sup = student_.forward(x_sup, true, perturb_rng_.next_u64()).probs;
  Var loss_sup = supervised_loss(p_sup, targets);
  Var total = loss_sup;

  Var loss_prior;
  if (tc.task == Task::localization) {
    loss_prior = prior_loss(p_sup, run_.prior);
    total = ag::add(total, ag::affine(loss_prior, static_cast<float>(run_.loss.omega), 0.0f));
  }

  bool ssl = tc.ssl_mode != SslMode::off && !unlabeled.empty();
  Var loss_con;
  if (ssl) {
    // consistency pool: labeled and unlabeled samples together
    std::vector<const Sample*> pool(labeled);
    pool.insert(pool.end(), unlabeled.begin(), unlabeled.end());
    std::int64_t B = static_cast<std::int64_t>(pool.size());
    std::int64_t m = pool[0]->images.dim(0), H = pool[0]->images.dim(1), W = pool[0]->images.dim(2);

    // (1) per-sample tau = (gamma, phi)
    std::vector<PerturbationParams> taus;
    for (std::int64_t b = 0; b < B; ++b) taus.push_back(sample_perturbation(run_.policy, perturb_rng_));

    // (2) student input: geometric then photometric perturbation
    Tensor x_stu({B, m, H, W});
    Tensor x_clean({B, m, H, W});
    for (std::int64_t b = 0; b < B; ++b) {
      const Sample& s = *pool[static_cast<std::size_t>(b)];
      std::copy_n(s.images.data(), m * H * W, x_clean.data() + b * m * H * W);
      Tensor warped = apply_geometric(s.images, taus[static_cast<std::size_t>(b)].gamma, Interp::bilinear);
      for (std::int64_t j = 0; j < m; ++j) {
        Tensor chan({H, W});
        std::copy_n(warped.data() + j * H * W, H * W, chan.data());
        PhotometricParams phi = taus[static_cast<std::size_t>(b)].phi;
        phi.dropout_seed = derive_seed(phi.dropout_seed, 100 + static_cast<std::uint64_t>(j));
        chan = apply_photometric(chan, phi);
        std::copy_n(chan.data(), H * W, x_stu.data() + (b * m + j) * H * W);
      }
    }
    Var p_stu = student_.forward(x_stu, true, perturb_rng_.next_u64()).probs;
    std::int64_t C = p_stu.value().dim(1);

    // (3) clean teacher target, no gradients, no dropout
    Tensor p_tea;
    {
      ag::NoGradGuard ng;
      p_tea = teacher_.forward(x_clean, false, 0).probs.value();
    }

    // (4) transform teacher probabilities into the student frame + validity
    Tensor p_tea_t({B, C, H, W});
    Tensor validity({B, C, H, W});
    for (std::int64_t b = 0; b < B; ++b) {
      const GeometricParams& g = taus[static_cast<std::size_t>(b)].gamma;
      Tensor pb({C, H, W});
      std::copy_n(p_tea.data() + b * C * H * W, C * H * W, pb.data());
      Tensor pt = transform_probability_map(pb, g);
      std::copy_n(pt.data(), C * H * W, p_tea_t.data() + b * C * H * W);
      Tensor v = validity_mask(g, H, W, C);
      std::copy_n(v.data(), C * H * W, validity.data() + b * C * H * W);
    }

    if (debug_) {
      debug_->captured = true;
      debug_->p_student = p_stu.value();
      debug_->p_teacher_transformed = p_tea_t;
      debug_->validity = validity;
    }

    if (tc.ssl_mode == SslMode::owc_uncertainty) {
      // (5) MC-dropout entropy, transformed into the student frame
      Tensor u = estimate_uncertainty(teacher_, x_clean, tc.t_mc, tc.mc_noise_std, mc_rng_);
      Tensor u_t({B, 1, H, W});
      for (std::int64_t b = 0; b < B; ++b) {
        Tensor ub({1, H, W});
        std::copy_n(u.data() + b * H * W, H * W, ub.data());
        Tensor ut = apply_geometric(ub, taus[static_cast<std::size_t>(b)].gamma, Interp::bilinear);
        std::copy_n(ut.data(), H * W, u_t.data() + b * H * W);
      }
      loss_con = uncertainty_consistency(p_stu, p_tea_t, validity, u_t, metrics.tau_t);
    } else {
      loss_con = consistency_mse(p_stu, p_tea_t, validity);
    }
    total = ag::add(total, ag::affine(loss_con, static_cast<float>(metrics.lambda_t), 0.0f));
  }

  metrics.total = total.value()[0];
  metrics.sup = loss_sup.value()[0];
  metrics.con = loss_con.defined() ? loss_con.value()[0] : 0.0;
  metrics.prior = loss_prior.defined() ? loss_prior.value()[0] : 0.0;
  if (!std::isfinite(metrics.total))
    throw DivergenceError("non-finite training loss at step " + std::to_string(step_));

  // (8) gradients into the student only
  student_.params().zero_grads();
  ag::backward(total);
  adam_step();

  // (9) EMA teacher update
  ema_update(teacher_.params(), student_.params(), tc.ema_alpha);
  ++step_;
  return metrics;
}

void SslTrainer::adam_step() {
  const TrainConfig& tc = run_.train;
  ++adam_.t;
  double b1 = tc.adam_beta1, b2 = tc.adam_beta2;
  double bc1 = 1.0 - std::pow(b1, static_cast<double>(adam_.t));
  double bc2 = 1.0 - std::pow(b2, static_cast<double>(adam_.t));
  for (std::size_t i = 0; i < student_.params().items.size(); ++i) {
    Tensor& w = student_.params().items[i].var.value_mut();
    Tensor& g = student_.params().items[i].var.grad();
    Tensor& mt = adam_.m[i];
    Tensor& vt = adam_.v[i];
    for (std::int64_t k = 0; k < w.numel(); ++k) {
      double gk = g[k] + tc.weight_decay * w[k];  // L2 regularization
      double m_new = b1 * mt[k] + (1.0 - b1) * gk;
      double v_new = b2 * vt[k] + (1.0 - b2) * gk * gk;
      mt[k] = static_cast<float>(m_new);
      vt[k] = static_cast<float>(v_new);
      w[k] -= static_cast<float>(lr_ * (m_new / bc1) / (std::sqrt(v_new / bc2) + 1e-8));
    }
  }
}

void SslTrainer::save_state(const std::filesystem::path& path,
                            const std::map<std::string, std::string>& extra) const {
  TensorArchive a;
  a.meta = extra;
  a.meta["kind"] = "train_state";
  a.meta["model_config"] = model_config_to_json(run_.model);
  a.meta["step"] = std::to_string(step_);
  a.meta["adam_t"] = std::to_string(adam_.t);
  a.meta["lr"] = std::to_string(lr_);
  a.meta["rng_data"] = data_rng_.serialize();
  a.meta["rng_unlabeled"] = unlabeled_rng_.serialize();
  a.meta["rng_aug"] = aug_rng_.serialize();
  a.meta["rng_perturb"] = perturb_rng_.serialize();
  a.meta["rng_mc"] = mc_rng_.serialize();
  for (const auto& it : student_.params().items) a.tensors.emplace_back("student." + it.name, it.var.value());
  for (const auto& it : teacher_.params().items) a.tensors.emplace_back("teacher." + it.name, it.var.value());
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    a.tensors.emplace_back("adam_m." + student_.params().items[i].name, adam_.m[i]);
    a.tensors.emplace_back("adam_v." + student_.params().items[i].name, adam_.v[i]);
  }
  save_archive(a, path);
}

void SslTrainer::load_state(const std::filesystem::path& path,
                            std::map<std::string, std::string>* extra_out) {
  TensorArchive a = load_archive(path);
  step_ = std::stoll(a.meta.at("step"));
  adam_.t = std::stoll(a.meta.at("adam_t"));
  lr_ = std::stod(a.meta.at("lr"));
  data_rng_.deserialize(a.meta.at("rng_data"));
  unlabeled_rng_.deserialize(a.meta.at("rng_unlabeled"));
  aug_rng_.deserialize(a.meta.at("rng_aug"));
  perturb_rng_.deserialize(a.meta.at("rng_perturb"));
  mc_rng_.deserialize(a.meta.at("rng_mc"));
  for (std::size_t i = 0; i < student_.params().items.size(); ++i) {
    auto& name = student_.params().items[i].name;
    student_.params().items[i].var.value_mut() = a.tensor("student." + name);
    teacher_.params().items[i].var.value_mut() = a.tensor("teacher." + name);
    adam_.m[i] = a.tensor("adam_m." + name);
    adam_.v[i] = a.tensor("adam_v." + name);
  }
  if (extra_out) *extra_out = a.meta;
}

// ---------------------------------------------------------------------------

namespace {

double validate_dice(Model& model, const std::vector<Sample>& val_labeled) {
  if (val_labeled.empty()) return 0.0;
  MetricsAccumulator acc;
  for (const auto& s : val_labeled) {
    std::int64_t m = s.images.dim(0), H = s.images.dim(1), W = s.images.dim(2);
    Tensor batch({1, m, H, W});
    std::copy_n(s.images.data(), m * H * W, batch.data());
    Tensor probs = predict_probs(model, batch);
    Tensor chw({probs.dim(1), H, W});
    std::copy_n(probs.data(), probs.numel(), chw.data());
    acc.add(probs_to_mask(chw), *s.mask);
  }
  MetricsReport rep = acc.report();
  double dice = 0.0;
  int n = 0;
  for (std::size_t c = 1; c < rep.per_class.size(); ++c) {
    dice += rep.per_class[c].dice;
    ++n;
  }
  return n > 0 ? dice / n : 0.0;
}

void append_history_line(const std::filesystem::path& file, const HistoryRecord& h) {
  json j;
  j["epoch"] = h.epoch;
  j["step"] = h.step;
  j["train_loss"] = h.train_loss;
  j["sup_loss"] = h.sup_loss;
  j["con_loss"] = h.con_loss;
  j["prior_loss"] = h.prior_loss;
  j["val_dice"] = h.val_dice;
  j["lr"] = h.lr;
  j["lambda_t"] = h.lambda_t;
  j["tau_t"] = h.tau_t;
  std::ofstream os(file, std::ios::app);
  if (!os) throw std::runtime_error("cannot append history: " + file.string());
  os << j.dump() << "\n";
}

}  // namespace

TrainResult train(const TrainRun& run, const DatasetManifest& manifest,
                  const std::vector<std::string>& train_ids,
                  const std::vector<std::string>& val_ids, const std::filesystem::path& out_dir,
                  bool resume) {
  std::filesystem::create_directories(out_dir);
  SampleSet train_set = collect_samples(manifest, train_ids, run.model.n_classes);
  SampleSet val_set = collect_samples(manifest, val_ids, run.model.n_classes);
  if (train_set.labeled.empty()) throw std::runtime_error("train: no labeled slices in training split");

  const TrainConfig& tc = run.train;
  std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(train_set.labeled.size()) + tc.batch_labeled - 1) / tc.batch_labeled;
  SslTrainer trainer(run, steps_per_epoch);

  TrainResult result;
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";
  result.history_file = out_dir / "history.jsonl";

  int start_epoch = 0;
  double best_val = -1.0;
  int best_epoch = -1;
  int epochs_since_best = 0, epochs_since_lr_event = 0;

  if (resume && std::filesystem::exists(result.last_checkpoint)) {
    std::map<std::string, std::string> extra;
    trainer.load_state(result.last_checkpoint, &extra);
    start_epoch = std::stoi(extra.at("epoch")) + 1;
    best_val = std::stod(extra.at("best_val"));
    best_epoch = std::stoi(extra.at("best_epoch"));
    epochs_since_best = std::stoi(extra.at("epochs_since_best"));
    epochs_since_lr_event = std::stoi(extra.at("epochs_since_lr_event"));
    std::ifstream hist(result.history_file);
    std::string line;
    while (std::getline(hist, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      HistoryRecord h;
      h.epoch = j.at("epoch");
      h.step = j.at("step");
      h.train_loss = j.at("train_loss");
      h.sup_loss = j.at("sup_loss");
      h.con_loss = j.at("con_loss");
      h.prior_loss = j.at("prior_loss");
      h.val_dice = j.at("val_dice");
      h.lr = j.at("lr");
      h.lambda_t = j.at("lambda_t");
      h.tau_t = j.at("tau_t");
      result.history.push_back(h);
    }
  } else {
    std::ofstream truncate(result.history_file, std::ios::trunc);
  }

  bool ssl = tc.ssl_mode != SslMode::off && !train_set.unlabeled.empty();
  std::vector<std::size_t> unlabeled_order;
  std::size_t unlabeled_pos = 0;

  for (int epoch = start_epoch; epoch < tc.max_epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.labeled.size());
    std::iota(order.begin(), order.end(), 0);
    trainer.data_rng().shuffle(order.begin(), order.end());

    StepMetrics epoch_sum;
    std::int64_t n_steps = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(tc.batch_labeled)) {
      std::vector<const Sample*> lb;
      for (std::size_t k = pos; k < std::min(order.size(), pos + static_cast<std::size_t>(tc.batch_labeled)); ++k)
        lb.push_back(&train_set.labeled[order[k]]);

      std::vector<const Sample*> ub;
      if (ssl) {
        for (int k = 0; k < tc.batch_unlabeled; ++k) {
          if (unlabeled_pos >= unlabeled_order.size()) {
            unlabeled_order.resize(train_set.unlabeled.size());
            std::iota(unlabeled_order.begin(), unlabeled_order.end(), 0);
            trainer.unlabeled_rng().shuffle(unlabeled_order.begin(), unlabeled_order.end());
            unlabeled_pos = 0;
          }
          ub.push_back(&train_set.unlabeled[unlabeled_order[unlabeled_pos++]]);
        }
      }

      StepMetrics sm;
      try {
        sm = trainer.train_step(lb, ub);
      } catch (const DivergenceError&) {
        trainer.save_state(out_dir / "diverged.ckpt", {{"epoch", std::to_string(epoch)}});
        throw;
      }
      epoch_sum.total += sm.total;
      epoch_sum.sup += sm.sup;
      epoch_sum.con += sm.con;
      epoch_sum.prior += sm.prior;
      epoch_sum.lambda_t = sm.lambda_t;
      epoch_sum.tau_t = sm.tau_t;
      ++n_steps;
    }

    double val_dice = validate_dice(trainer.student(), val_set.labeled);

    HistoryRecord h;
    h.epoch = epoch;
    h.step = trainer.global_step();
    h.train_loss = epoch_sum.total / static_cast<double>(n_steps);
    h.sup_loss = epoch_sum.sup / static_cast<double>(n_steps);
    h.con_loss = epoch_sum.con / static_cast<double>(n_steps);
    h.prior_loss = epoch_sum.prior / static_cast<double>(n_steps);
    h.val_dice = val_dice;
    h.lr = trainer.current_lr();
    h.lambda_t = epoch_sum.lambda_t;
    h.tau_t = epoch_sum.tau_t;
    result.history.push_back(h);
    append_history_line(result.history_file, h);

    bool improved = val_dice > best_val;
    if (improved) {
      best_val = val_dice;
      best_epoch = epoch;
      epochs_since_best = 0;
      epochs_since_lr_event = 0;
      save_model_checkpoint(trainer.student(), result.best_checkpoint,
                            {{"epoch", std::to_string(epoch)},
                             {"val_dice", std::to_string(val_dice)},
                             {"task", to_string(tc.task)}});
    } else {
      ++epochs_since_best;
      ++epochs_since_lr_event;
    }

    if (epochs_since_lr_event >= tc.lr_patience) {
      trainer.set_lr(trainer.current_lr() * tc.lr_factor);
      epochs_since_lr_event = 0;
    }

    trainer.save_state(result.last_checkpoint,
                       {{"epoch", std::to_string(epoch)},
                        {"best_val", std::to_string(best_val)},
                        {"best_epoch", std::to_string(best_epoch)},
                        {"epochs_since_best", std::to_string(epochs_since_best)},
                        {"epochs_since_lr_event", std::to_string(epochs_since_lr_event)}});

    result.stopped_epoch = epoch;
    if (epochs_since_best >= tc.patience) break;
  }

  result.best_val_dice = best_val;
  result.best_epoch = best_epoch;
  if (best_epoch < 0)  // no validation split: fall back to the final weights
    save_model_checkpoint(trainer.student(), result.best_checkpoint,
                          {{"epoch", std::to_string(result.stopped_epoch)},
                           {"val_dice", "0"},
                           {"task", to_string(tc.task)}});
  return result;
}

double evaluate_dice(Model& model, const DatasetManifest& manifest,
                     const std::vector<std::string>& ids) {
  SampleSet set = collect_samples(manifest, ids, model.config().n_classes);
  return validate_dice(model, set.labeled);
}

CvResult cross_validate(const TrainRun& run, const DatasetManifest& manifest, int k,
                        const std::filesystem::path& out_dir) {
  auto folds = split_kfold(manifest, k, run.train.seed);
  CvResult cv;
  for (int f = 0; f < k; ++f) {
    TrainRun fold_run = run;
    fold_run.train.seed = derive_seed(run.train.seed, 1000 + static_cast<std::uint64_t>(f));
    auto& fold = folds[static_cast<std::size_t>(f)];
    TrainResult tr = train(fold_run, manifest, fold.train, fold.val,
                           out_dir / ("fold" + std::to_string(f)));
    FoldResult fr;
    fr.fold = f;
    fr.val_dice = tr.best_val_dice;
    fr.val_patients = fold.val;
    cv.folds.push_back(std::move(fr));
    cv.mean_val_dice += tr.best_val_dice;
  }
  cv.mean_val_dice /= static_cast<double>(k);
  return cv;
}

}  // namespace carotidseg
