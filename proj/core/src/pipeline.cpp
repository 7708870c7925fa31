#include "carotidseg/pipeline.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "carotidseg/preprocess.hpp"
#include "carotidseg/volume_io.hpp"

namespace carotidseg {

using json = nlohmann::ordered_json;

SliceCenters slice_centers(const Tensor& prob_hw, const PriorConfig& prior, bool use_filter) {
  SliceCenters sc;
  if (use_filter) {
    PriorFilterResult fr = prior_filter(prob_hw, prior);
    sc.left_ok = fr.left.detected;
    sc.right_ok = fr.right.detected;
    sc.left_row = fr.left.center_row;
    sc.left_col = fr.left.center_col;
    sc.right_row = fr.right.center_row;
    sc.right_col = fr.right.center_col;
    return sc;
  }
  std::int64_t H = prob_hw.dim(0), W = prob_hw.dim(1), mid = W / 2;
  double nl = 0, rl = 0, cl = 0, nr = 0, rr = 0, cr = 0;
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) {
      if (prob_hw.at(r, c) < static_cast<float>(prior.binarize_threshold)) continue;
      if (c < mid) {
        nl += 1;
        rl += static_cast<double>(r);
        cl += static_cast<double>(c);
      } else {
        nr += 1;
        rr += static_cast<double>(r);
        cr += static_cast<double>(c);
      }
    }
  if (nl > 0) {
    sc.left_ok = true;
    sc.left_row = rl / nl;
    sc.left_col = cl / nl;
  }
  if (nr > 0) {
    sc.right_ok = true;
    sc.right_row = rr / nr;
    sc.right_col = cr / nr;
  }
  return sc;
}

RoiExtractResult extract_roi_dataset(Model& loc_model, const DatasetManifest& src,
                                     const std::vector<std::string>& patient_ids,
                                     const RoiExtractOptions& opt,
                                     const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  RoiExtractResult result;

  DatasetManifest roi;
  roi.base_dir = out_dir;
  roi.sequence_names = src.sequence_names;
  roi.class_scheme = src.class_scheme;

  json index = json::array();
  std::ofstream detlog(out_dir / "detections.jsonl", std::ios::trunc);

  for (const auto& pid : patient_ids) {
    auto slices = load_patient_slices(src, pid, true);
    struct SideStack {
      std::vector<MultiSequenceSlice> rois;
      std::vector<int> labeled;
    } stacks[2];

    for (auto& slice : slices) {
      ++result.n_slices;
      std::int64_t m = slice.n_sequences(), H = slice.height(), W = slice.width();
      Tensor batch({1, m, H, W});
      for (std::int64_t j = 0; j < m; ++j)
        std::copy_n(slice.images[static_cast<std::size_t>(j)].data(), H * W,
                    batch.data() + j * H * W);
      Tensor probs = predict_probs(loc_model, batch);
      Tensor prob_hw({H, W});
      std::copy_n(probs.data(), H * W, prob_hw.data());
      SliceCenters sc = slice_centers(prob_hw, opt.prior, opt.use_prior_filter);

      std::string sid = pid + ":" + std::to_string(slice.slice_index);
      if (slice.mask) {
        Tensor fg = slice.mask->foreground();
        DetectionRecord rec;
        rec.slice_id = sid;
        rec.left_detected = side_detected(fg, true, sc.left_ok, sc.left_row, sc.left_col, opt.roi_size);
        rec.right_detected = side_detected(fg, false, sc.right_ok, sc.right_row, sc.right_col, opt.roi_size);
        if (!rec.left_detected) rec.failure_reason = "left carotid missed or cut off";
        if (!rec.right_detected)
          rec.failure_reason += std::string(rec.failure_reason.empty() ? "" : "; ") +
                                "right carotid missed or cut off";
        result.records.push_back(rec);
      }

      for (int side = 0; side < 2; ++side) {
        bool ok = side == 0 ? sc.left_ok : sc.right_ok;
        double row = side == 0 ? sc.left_row : sc.right_row;
        double col = side == 0 ? sc.left_col : sc.right_col;
        json dj;
        dj["slice"] = sid;
        dj["side"] = side == 0 ? "L" : "R";
        dj["detected"] = ok;
        if (!ok) {
          detlog << dj.dump() << "\n";
          continue;  // detection failed: log and skip, run continues
        }
        std::int64_t cr = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::llround(row)), 0, H - 1);
        std::int64_t cc = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::llround(col)), 0, W - 1);
        dj["center"] = {cr, cc};
        detlog << dj.dump() << "\n";

        MultiSequenceSlice roi_slice = extract_roi(slice, {cr, cc}, {opt.roi_size, opt.roi_size});
        auto& st = stacks[side];
        if (roi_slice.mask) st.labeled.push_back(static_cast<int>(st.rois.size()));
        st.rois.push_back(std::move(roi_slice));
        ++result.n_rois;

        json ij;
        ij["patient"] = pid;
        ij["slice_index"] = slice.slice_index;
        ij["side"] = side == 0 ? "L" : "R";
        ij["center"] = {cr, cc};
        index.push_back(ij);
      }
    }

    for (int side = 0; side < 2; ++side) {
      auto& st = stacks[side];
      if (st.rois.empty()) continue;
      std::string suffix = side == 0 ? "L" : "R";
      std::string entry_id = pid + "/" + suffix;
      std::string dir_rel = pid + "_" + suffix;
      std::filesystem::create_directories(out_dir / dir_rel);
      std::int64_t K = static_cast<std::int64_t>(st.rois.size());
      std::int64_t R = opt.roi_size;

      PatientEntry entry;
      entry.id = entry_id;
      for (std::size_t j = 0; j < roi.sequence_names.size(); ++j) {
        Volume v = Volume::zeros(K, R, R);
        for (std::int64_t k = 0; k < K; ++k)
          v.set_slice(k, st.rois[static_cast<std::size_t>(k)].images[j]);
        std::string rel = dir_rel + "/" + roi.sequence_names[j] + ".rvol";
        save_volume(v, out_dir / rel);
        entry.volumes[roi.sequence_names[j]] = rel;
      }
      entry.labeled_slices = st.labeled;
      if (!st.labeled.empty()) {
        Volume mv = Volume::zeros(K, R, R);
        for (int k : st.labeled)
          mv.set_slice(k, st.rois[static_cast<std::size_t>(k)].mask->to_label_map());
        std::string rel = dir_rel + "/mask.rvol";
        save_volume(mv, out_dir / rel);
        entry.mask = rel;
      }
      roi.patients.push_back(std::move(entry));
    }
  }

  result.roi_manifest_path = out_dir / "manifest.json";
  save_manifest(roi, result.roi_manifest_path);
  std::ofstream idx(out_dir / "roi_index.json");
  idx << index.dump(2) << "\n";
  return result;
}

EvalResult evaluate_model(Model& model, const DatasetManifest& manifest,
                          const std::vector<std::string>& patient_ids) {
  SampleSet set = collect_samples(manifest, patient_ids, model.config().n_classes);
  if (set.labeled.empty()) throw std::runtime_error("evaluate_model: no labeled slices to evaluate");
  MetricsAccumulator acc;
  for (const auto& s : set.labeled) {
    std::int64_t m = s.images.dim(0), H = s.images.dim(1), W = s.images.dim(2);
    Tensor batch({1, m, H, W});
    std::copy_n(s.images.data(), m * H * W, batch.data());
    Tensor probs = predict_probs(model, batch);
    Tensor chw({probs.dim(1), H, W});
    std::copy_n(probs.data(), probs.numel(), chw.data());
    acc.add(probs_to_mask(chw), *s.mask);
  }
  EvalResult res;
  res.report = acc.report();
  res.slice_dice = acc.slice_macro_dice();
  return res;
}

void predict_to_dir(Model& model, const DatasetManifest& manifest,
                    const std::vector<std::string>& patient_ids,
                    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  json meta = json::array();
  for (const auto& pid : patient_ids) {
    auto slices = load_patient_slices(manifest, pid, true);
    if (slices.empty()) continue;
    std::int64_t H = slices[0].height(), W = slices[0].width();
    Volume pred = Volume::zeros(static_cast<std::int64_t>(slices.size()), H, W);
    for (std::size_t k = 0; k < slices.size(); ++k) {
      std::int64_t m = slices[k].n_sequences();
      Tensor batch({1, m, H, W});
      for (std::int64_t j = 0; j < m; ++j)
        std::copy_n(slices[k].images[static_cast<std::size_t>(j)].data(), H * W,
                    batch.data() + j * H * W);
      Tensor probs = predict_probs(model, batch);
      Tensor chw({probs.dim(1), H, W});
      std::copy_n(probs.data(), probs.numel(), chw.data());
      pred.set_slice(static_cast<std::int64_t>(k), probs_to_mask(chw).to_label_map());
    }
    std::string safe_id = pid;
    for (auto& ch : safe_id)
      if (ch == '/') ch = '_';
    std::string rel = "pred_" + safe_id + ".rvol";
    save_volume(pred, out_dir / rel);
    json pj;
    pj["patient"] = pid;
    pj["prediction"] = rel;
    meta.push_back(pj);
  }
  std::ofstream os(out_dir / "predictions.json");
  os << meta.dump(2) << "\n";
}

}  // namespace carotidseg
