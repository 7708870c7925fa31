// Command-line front end for the two-stage carotid segmentation pipeline:
//   synth -> train-loc -> extract-roi -> train-seg -> predict -> evaluate -> report
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "carotidseg/checkpoint.hpp"
#include "carotidseg/config.hpp"
#include "carotidseg/eval.hpp"
#include "carotidseg/pipeline.hpp"
#include "carotidseg/synth.hpp"
#include "carotidseg/trainer.hpp"

namespace cs = carotidseg;
namespace fs = std::filesystem;

namespace {

fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("CAROTIDSEG_OUT_ROOT")) return fs::path(root) / p;
  return p;
}

struct CommonOpts {
  std::string config;
  std::vector<std::string> overrides;
  std::string manifest;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true, bool with_out = true) {
  auto* c = cmd->add_option("--config", o.config, "run configuration file (TOML)");
  if (config_required) c->required();
  cmd->add_option("--override,-O", o.overrides, "config override section.key=value (repeatable)");
  cmd->add_option("--manifest", o.manifest, "dataset manifest path (overrides data.manifest)");
  if (with_out) cmd->add_option("--out", o.out, "output directory (overrides run.out_dir)");
}

cs::RunConfig load_config(const CommonOpts& o, cs::Task task) {
  cs::RunConfig cfg = o.config.empty() ? cs::default_run_config(task)
                                       : cs::load_run_config(o.config, o.overrides, task);
  if (o.config.empty())
    for (const auto& ov : o.overrides) {
      cs::ConfigMap m;
      cs::apply_override(m, ov);
      // re-parse with overrides only
      cfg = cs::run_config_from_map(m, task);
    }
  if (!o.manifest.empty()) cfg.manifest = o.manifest;
  if (!o.out.empty()) cfg.out_dir = o.out;
  return cfg;
}

void echo_config(const cs::RunConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "config_effective.toml");
  os << cs::run_config_to_toml(cfg);
}

void write_splits(const cs::DatasetSplits& s, const fs::path& out_dir) {
  std::ofstream os(out_dir / "splits.json");
  auto dump = [&](const char* name, const std::vector<std::string>& ids, bool last) {
    os << "  \"" << name << "\": [";
    for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? ", " : "") << "\"" << ids[i] << "\"";
    os << "]" << (last ? "" : ",") << "\n";
  };
  os << "{\n";
  dump("train", s.train, false);
  dump("val", s.val, false);
  dump("test", s.test, true);
  os << "}\n";
}

std::vector<std::string> split_ids(const cs::DatasetSplits& s, const std::string& which) {
  if (which == "train") return s.train;
  if (which == "val") return s.val;
  if (which == "test") return s.test;
  std::vector<std::string> all = s.train;
  all.insert(all.end(), s.val.begin(), s.val.end());
  all.insert(all.end(), s.test.begin(), s.test.end());
  return all;
}

int run_train(const CommonOpts& opts, cs::Task task, bool resume, int cv_folds) {
  cs::RunConfig cfg = load_config(opts, task);
  if (cfg.manifest.empty()) throw cs::ConfigError("data.manifest is required for training");
  fs::path out = resolve_out(cfg.out_dir);
  echo_config(cfg, out);
  cs::DatasetManifest manifest = cs::load_manifest(cfg.manifest);

  if (cv_folds > 0) {
    cs::CvResult cv = cs::cross_validate(cfg.run, manifest, cv_folds, out);
    for (const auto& f : cv.folds)
      std::cout << "fold " << f.fold << ": val_dice " << f.val_dice << "\n";
    std::cout << "mean val_dice over " << cv_folds << " folds: " << cv.mean_val_dice << "\n";
    return 0;
  }

  cs::DatasetSplits splits = cs::split_patientwise(manifest, 0.8, 0.1, 0.1, cfg.seed);
  write_splits(splits, out);
  cs::TrainResult res = cs::train(cfg.run, manifest, splits.train, splits.val, out, resume);
  std::cout << "best checkpoint: " << res.best_checkpoint.string() << "\n"
            << "best val dice: " << res.best_val_dice << " (epoch " << res.best_epoch << ")\n"
            << "stopped after epoch " << res.stopped_epoch << "\n"
            << "history: " << res.history_file.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"carotidseg: two-stage semi-supervised vessel-wall/plaque segmentation"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "generate a synthetic phantom dataset");
  CommonOpts synth_opts;
  int sp_patients = -1, sp_slices = -1, sp_size = -1, sp_seqs = -1;
  double sp_plaque = -1, sp_distract = -1, sp_labeled = -1;
  std::int64_t sp_seed = -1;
  std::string sp_scheme, sp_out;
  add_common(synth, synth_opts, false, false);
  synth->add_option("--patients", sp_patients, "number of patients");
  synth->add_option("--slices", sp_slices, "slices per patient");
  synth->add_option("--size", sp_size, "square image size");
  synth->add_option("--sequences", sp_seqs, "number of pseudo-sequences");
  synth->add_option("--plaque-prob", sp_plaque, "per-vessel plaque probability");
  synth->add_option("--distractors", sp_distract, "expected distractor blobs per slice");
  synth->add_option("--labeled-fraction", sp_labeled, "fraction of slices with masks");
  synth->add_option("--scheme", sp_scheme, "binary|multiclass");
  synth->add_option("--seed", sp_seed, "generator seed");
  synth->add_option("--out", sp_out, "output dataset directory")->required();

  // ---- train ----
  auto* train_loc = app.add_subcommand("train-loc", "train the coarse localization model");
  auto* train_seg = app.add_subcommand("train-seg", "train the fine segmentation model");
  CommonOpts tl_opts, ts_opts;
  bool tl_resume = false, ts_resume = false;
  int ts_cv = 0;
  add_common(train_loc, tl_opts);
  add_common(train_seg, ts_opts);
  train_loc->add_flag("--resume", tl_resume, "resume from last.ckpt");
  train_seg->add_flag("--resume", ts_resume, "resume from last.ckpt");
  train_seg->add_option("--cv", ts_cv, "run patient-wise k-fold cross-validation");

  // ---- extract-roi ----
  auto* extract = app.add_subcommand("extract-roi", "localize carotids and crop an ROI dataset");
  CommonOpts ex_opts;
  std::string ex_ckpt;
  add_common(extract, ex_opts);
  extract->add_option("--checkpoint", ex_ckpt, "localization checkpoint")->required();

  // ---- predict ----
  auto* predict = app.add_subcommand("predict", "write predicted masks for a dataset");
  CommonOpts pr_opts;
  std::string pr_ckpt, pr_split = "all";
  add_common(predict, pr_opts, false);
  predict->add_option("--checkpoint", pr_ckpt, "model checkpoint")->required();
  predict->add_option("--split", pr_split, "train|val|test|all (default all)");

  // ---- evaluate ----
  auto* evaluate = app.add_subcommand("evaluate", "compute segmentation metrics on a split");
  CommonOpts ev_opts;
  std::string ev_ckpt, ev_split = "test";
  add_common(evaluate, ev_opts, false);
  evaluate->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  evaluate->add_option("--split", ev_split, "train|val|test|all (default test)");

  // ---- report ----
  auto* report = app.add_subcommand("report", "render metric tables and training curves");
  CommonOpts rp_opts;
  std::string rp_run_dir, rp_ckpt, rp_split = "test";
  add_common(report, rp_opts, false);
  report->add_option("--run-dir", rp_run_dir, "training output directory (for history.jsonl)");
  report->add_option("--checkpoint", rp_ckpt, "model checkpoint to evaluate");
  report->add_option("--split", rp_split, "split to evaluate (default test)");

  // ---- fusion-table ----
  auto* fusion = app.add_subcommand(
      "fusion-table", "train {basic,ours} x {input,bottleneck} on one split and tabulate");
  CommonOpts fu_opts;
  add_common(fusion, fu_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) {
      cs::RunConfig cfg = load_config(synth_opts, cs::Task::localization);
      cs::PhantomSpec spec = cfg.synth;
      if (sp_patients >= 0) spec.n_patients = sp_patients;
      if (sp_slices >= 0) spec.slices_per_patient = sp_slices;
      if (sp_size >= 0) spec.height = spec.width = sp_size;
      if (sp_seqs >= 0) spec.n_sequences = sp_seqs;
      if (sp_plaque >= 0) spec.plaque_probability = sp_plaque;
      if (sp_distract >= 0) spec.distractor_rate = sp_distract;
      if (sp_labeled >= 0) spec.labeled_fraction = sp_labeled;
      if (!sp_scheme.empty()) spec.class_scheme = cs::class_scheme_from_string(sp_scheme);
      if (sp_seed >= 0) spec.seed = static_cast<std::uint64_t>(sp_seed);
      fs::path out = resolve_out(sp_out);
      cs::generate_phantom(spec, out);
      std::cout << (out / "manifest.json").string() << "\n";
      return 0;
    }

    if (train_loc->parsed()) return run_train(tl_opts, cs::Task::localization, tl_resume, 0);
    if (train_seg->parsed()) return run_train(ts_opts, cs::Task::segmentation, ts_resume, ts_cv);

    if (extract->parsed()) {
      cs::RunConfig cfg = load_config(ex_opts, cs::Task::localization);
      if (cfg.manifest.empty()) throw cs::ConfigError("data.manifest is required for extract-roi");
      fs::path out = resolve_out(cfg.out_dir);
      echo_config(cfg, out);
      cs::DatasetManifest manifest = cs::load_manifest(cfg.manifest);
      cs::Model model = cs::load_model_checkpoint(ex_ckpt);
      cs::RoiExtractOptions opt;
      opt.roi_size = cfg.roi_size;
      opt.use_prior_filter = cfg.use_prior_filter;
      opt.prior = cfg.run.prior;
      std::vector<std::string> ids;
      for (const auto& p : manifest.patients) ids.push_back(p.id);
      cs::RoiExtractResult res = cs::extract_roi_dataset(model, manifest, ids, opt, out);
      std::cout << "roi manifest: " << res.roi_manifest_path.string() << "\n"
                << "rois extracted: " << res.n_rois << " from " << res.n_slices << " slices\n";
      if (!res.records.empty()) {
        cs::DetectionSummary s = cs::detection_rate(res.records);
        std::cout << "detection rate (labeled slices): " << s.rate << " (" << s.n_failed << "/"
                  << s.n_total << " failed)\n";
      }
      return 0;
    }

    if (predict->parsed()) {
      cs::RunConfig cfg = load_config(pr_opts, cs::Task::segmentation);
      if (cfg.manifest.empty()) throw cs::ConfigError("a manifest is required for predict");
      fs::path out = resolve_out(cfg.out_dir);
      cs::DatasetManifest manifest = cs::load_manifest(cfg.manifest);
      cs::Model model = cs::load_model_checkpoint(pr_ckpt);
      cs::DatasetSplits splits = cs::split_patientwise(manifest, 0.8, 0.1, 0.1, cfg.seed);
      cs::predict_to_dir(model, manifest, split_ids(splits, pr_split), out);
      std::cout << "predictions written to " << out.string() << "\n";
      return 0;
    }

    if (evaluate->parsed()) {
      cs::RunConfig cfg = load_config(ev_opts, cs::Task::segmentation);
      if (cfg.manifest.empty()) throw cs::ConfigError("a manifest is required for evaluate");
      fs::path out = resolve_out(cfg.out_dir);
      cs::DatasetManifest manifest = cs::load_manifest(cfg.manifest);
      cs::Model model = cs::load_model_checkpoint(ev_ckpt);
      cs::DatasetSplits splits = cs::split_patientwise(manifest, 0.8, 0.1, 0.1, cfg.seed);
      cs::EvalResult res = cs::evaluate_model(model, manifest, split_ids(splits, ev_split));
      cs::emit_report({}, res.report, res.slice_dice, out);
      std::cout << "Class,Dice,IoU,Precision,Recall\n";
      for (std::size_t c = 0; c < res.report.per_class.size(); ++c)
        std::cout << cs::metrics_csv_row(res.report.class_names[c], res.report.per_class[c]) << "\n";
      std::cout << cs::metrics_csv_row("macro", res.report.macro) << "\n"
                << "written to " << (out / "metrics.csv").string() << "\n";
      return 0;
    }

    if (report->parsed()) {
      cs::RunConfig cfg = load_config(rp_opts, cs::Task::segmentation);
      fs::path out = resolve_out(cfg.out_dir);
      std::vector<cs::HistoryRecord> history;
      if (!rp_run_dir.empty()) {
        std::ifstream hist(fs::path(rp_run_dir) / "history.jsonl");
        if (!hist) throw std::runtime_error("no history.jsonl under " + rp_run_dir);
        std::string line;
        while (std::getline(hist, line)) {
          if (line.empty()) continue;
          // minimal parse: the history emitter writes flat one-line JSON
          cs::HistoryRecord h;
          auto grab = [&](const char* key) {
            auto pos = line.find(std::string("\"") + key + "\":");
            if (pos == std::string::npos) return 0.0;
            return std::atof(line.c_str() + pos + std::strlen(key) + 3);
          };
          h.epoch = static_cast<int>(grab("epoch"));
          h.step = static_cast<std::int64_t>(grab("step"));
          h.train_loss = grab("train_loss");
          h.sup_loss = grab("sup_loss");
          h.con_loss = grab("con_loss");
          h.prior_loss = grab("prior_loss");
          h.val_dice = grab("val_dice");
          h.lr = grab("lr");
          h.lambda_t = grab("lambda_t");
          h.tau_t = grab("tau_t");
          history.push_back(h);
        }
      }
      cs::MetricsReport rep;
      std::vector<double> dice;
      if (!rp_ckpt.empty()) {
        if (cfg.manifest.empty()) throw cs::ConfigError("a manifest is required to evaluate");
        cs::DatasetManifest manifest = cs::load_manifest(cfg.manifest);
        cs::Model model = cs::load_model_checkpoint(rp_ckpt);
        cs::DatasetSplits splits = cs::split_patientwise(manifest, 0.8, 0.1, 0.1, cfg.seed);
        cs::EvalResult res = cs::evaluate_model(model, manifest, split_ids(splits, rp_split));
        rep = res.report;
        dice = res.slice_dice;
      } else {
        rep.class_names = {"background"};
        rep.per_class.resize(1);
      }
      cs::emit_report(history, rep, dice, out);
      std::cout << "report written to " << out.string() << "\n";
      return 0;
    }

    if (fusion->parsed()) {
      cs::RunConfig cfg = load_config(fu_opts, cs::Task::segmentation);
      if (cfg.manifest.empty()) throw cs::ConfigError("data.manifest is required for fusion-table");
      fs::path out = resolve_out(cfg.out_dir);
      echo_config(cfg, out);
      cs::DatasetManifest manifest = cs::load_manifest(cfg.manifest);
      cs::DatasetSplits splits = cs::split_patientwise(manifest, 0.8, 0.1, 0.1, cfg.seed);
      write_splits(splits, out);

      struct Row {
        const char* label;
        cs::ModelConfig::Arch arch;
        cs::ModelConfig::Fusion fusion;
      };
      const Row rows[4] = {
          {"basic input", cs::ModelConfig::Arch::basic, cs::ModelConfig::Fusion::input},
          {"basic bottleneck", cs::ModelConfig::Arch::basic, cs::ModelConfig::Fusion::bottleneck},
          {"ours input", cs::ModelConfig::Arch::ours, cs::ModelConfig::Fusion::input},
          {"ours bottleneck", cs::ModelConfig::Arch::ours, cs::ModelConfig::Fusion::bottleneck},
      };
      std::ofstream csv(out / "fusion_table.csv");
      csv << "Model,Dice,IoU,Precision,Recall\n";
      std::cout << "Model,Dice,IoU,Precision,Recall\n";
      for (const auto& row : rows) {
        cs::TrainRun run = cfg.run;
        run.model.arch = row.arch;
        run.model.fusion = row.fusion;
        if (row.arch == cs::ModelConfig::Arch::basic) {
          run.model.use_se = false;
          run.model.use_deep_supervision = false;
        }
        std::string tag = std::string(row.label);
        for (auto& ch : tag)
          if (ch == ' ') ch = '_';
        cs::TrainResult tr = cs::train(run, manifest, splits.train, splits.val, out / tag);
        cs::Model best = cs::load_model_checkpoint(tr.best_checkpoint);
        cs::EvalResult res = cs::evaluate_model(best, manifest,
                                                splits.test.empty() ? splits.val : splits.test);
        std::string line = cs::metrics_csv_row(row.label, res.report.macro);
        csv << line << "\n";
        std::cout << line << "\n";
      }
      std::cout << "table written to " << (out / "fusion_table.csv").string() << "\n";
      return 0;
    }
  } catch (const cs::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
