#include "carotidseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace carotidseg {

ClassMetrics metrics_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn) {
  ClassMetrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  if (tp == 0 && fp == 0 && fn == 0) {
    // class absent from both pred and gt: perfect absence
    m.dice = m.iou = m.precision = m.recall = 1.0;
    return m;
  }
  auto safe = [](double num, double den) { return den > 0.0 ? num / den : 0.0; };
  m.dice = safe(2.0 * static_cast<double>(tp), static_cast<double>(2 * tp + fp + fn));
  m.iou = safe(static_cast<double>(tp), static_cast<double>(tp + fp + fn));
  m.precision = safe(static_cast<double>(tp), static_cast<double>(tp + fp));
  m.recall = safe(static_cast<double>(tp), static_cast<double>(tp + fn));
  return m;
}

namespace {

void accumulate_counts(const SegmentationMask& pred, const SegmentationMask& gt,
                       std::vector<ClassMetrics>& counts) {
  if (!pred.data.same_shape(gt.data))
    throw std::invalid_argument("segmentation_metrics: shape mismatch " + pred.data.shape_str() +
                                " vs " + gt.data.shape_str());
  std::int64_t C = pred.n_classes(), HW = pred.height() * pred.width();
  for (std::int64_t c = 0; c < C; ++c) {
    const float* pp = pred.data.data() + c * HW;
    const float* gp = gt.data.data() + c * HW;
    for (std::int64_t i = 0; i < HW; ++i) {
      bool p = pp[i] == 1.0f, g = gp[i] == 1.0f;
      if (p && g) ++counts[static_cast<std::size_t>(c)].tp;
      else if (p) ++counts[static_cast<std::size_t>(c)].fp;
      else if (g) ++counts[static_cast<std::size_t>(c)].fn;
      else ++counts[static_cast<std::size_t>(c)].tn;
    }
  }
}

MetricsReport finalize(const std::vector<std::string>& names, const std::vector<ClassMetrics>& counts,
                       std::int64_t n_slices) {
  MetricsReport r;
  r.class_names = names;
  r.n_slices = n_slices;
  double d = 0, i = 0, p = 0, rc = 0;
  for (const auto& c : counts) {
    ClassMetrics m = metrics_from_counts(c.tp, c.fp, c.fn, c.tn);
    r.per_class.push_back(m);
    d += m.dice;
    i += m.iou;
    p += m.precision;
    rc += m.recall;
    r.macro.tp += m.tp;
    r.macro.fp += m.fp;
    r.macro.fn += m.fn;
    r.macro.tn += m.tn;
  }
  double n = static_cast<double>(counts.size());
  r.macro.dice = d / n;
  r.macro.iou = i / n;
  r.macro.precision = p / n;
  r.macro.recall = rc / n;
  return r;
}

}  // namespace

MetricsReport segmentation_metrics(const SegmentationMask& pred, const SegmentationMask& gt) {
  std::vector<ClassMetrics> counts(static_cast<std::size_t>(pred.n_classes()));
  accumulate_counts(pred, gt, counts);
  return finalize(gt.classes, counts, 1);
}

void MetricsAccumulator::add(const SegmentationMask& pred, const SegmentationMask& gt) {
  if (counts_.empty()) {
    class_names_ = gt.classes;
    counts_.resize(static_cast<std::size_t>(gt.n_classes()));
  }
  accumulate_counts(pred, gt, counts_);
  ++n_slices_;
  slice_dice_.push_back(segmentation_metrics(pred, gt).macro.dice);
}

MetricsReport MetricsAccumulator::report() const {
  if (counts_.empty()) throw std::runtime_error("metrics: no slices accumulated");
  return finalize(class_names_, counts_, n_slices_);
}

DetectionSummary detection_rate(const std::vector<DetectionRecord>& records) {
  if (records.empty()) throw std::invalid_argument("detection_rate: empty record list");
  DetectionSummary s;
  s.n_total = static_cast<std::int64_t>(records.size());
  for (const auto& r : records) {
    if (!r.fully_detected()) {
      ++s.n_failed;
      s.failures.push_back(r.slice_id);
    }
  }
  s.rate = static_cast<double>(s.n_total - s.n_failed) / static_cast<double>(s.n_total);
  return s;
}

bool side_detected(const Tensor& gt_foreground, bool left_side, bool has_center, double center_row,
                   double center_col, std::int64_t roi_size) {
  if (gt_foreground.rank() != 2) throw std::invalid_argument("side_detected: expected (H,W)");
  std::int64_t H = gt_foreground.dim(0), W = gt_foreground.dim(1), mid = W / 2;
  std::int64_t r_lo = H, r_hi = -1, c_lo = W, c_hi = -1;
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = left_side ? 0 : mid; c < (left_side ? mid : W); ++c)
      if (gt_foreground.at(r, c) != 0.0f) {
        r_lo = std::min(r_lo, r);
        r_hi = std::max(r_hi, r);
        c_lo = std::min(c_lo, c);
        c_hi = std::max(c_hi, c);
      }
  if (r_hi < 0) return true;  // nothing to detect on this side
  if (!has_center) return false;

  if (center_row < static_cast<double>(r_lo) || center_row > static_cast<double>(r_hi) ||
      center_col < static_cast<double>(c_lo) || center_col > static_cast<double>(c_hi))
    return false;

  // the ROI centered at the prediction must not cut off any foreground
  std::int64_t cr = static_cast<std::int64_t>(std::llround(center_row));
  std::int64_t cc = static_cast<std::int64_t>(std::llround(center_col));
  std::int64_t roi_r0 = cr - roi_size / 2, roi_c0 = cc - roi_size / 2;
  return r_lo >= roi_r0 && r_hi < roi_r0 + roi_size && c_lo >= roi_c0 && c_hi < roi_c0 + roi_size;
}

double cohens_kappa(const std::vector<int>& ratings_a, const std::vector<int>& ratings_b,
                    const std::vector<int>& categories) {
  if (ratings_a.size() != ratings_b.size())
    throw std::invalid_argument("cohens_kappa: rating lists differ in length");
  if (ratings_a.empty()) throw std::invalid_argument("cohens_kappa: empty ratings");
  std::map<int, std::size_t> index;
  for (std::size_t i = 0; i < categories.size(); ++i) index[categories[i]] = i;
  std::size_t K = categories.size();
  std::vector<double> table(K * K, 0.0);
  for (std::size_t i = 0; i < ratings_a.size(); ++i) {
    auto a = index.find(ratings_a[i]);
    auto b = index.find(ratings_b[i]);
    if (a == index.end() || b == index.end())
      throw std::invalid_argument("cohens_kappa: rating outside category set");
    table[a->second * K + b->second] += 1.0;
  }
  double n = static_cast<double>(ratings_a.size());
  double po = 0.0, pe = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    po += table[k * K + k] / n;
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      row += table[k * K + j];
      col += table[j * K + k];
    }
    pe += (row / n) * (col / n);
  }
  if (pe >= 1.0) return 1.0;
  return (po - pe) / (1.0 - pe);
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

void write_polyline_svg(std::ofstream& os, const std::vector<double>& xs,
                        const std::vector<double>& ys, double x0, double y0, double w, double h,
                        double xmin, double xmax, double ymin, double ymax, const char* color) {
  os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double px = x0 + (xs[i] - xmin) / std::max(1e-12, xmax - xmin) * w;
    double py = y0 + h - (ys[i] - ymin) / std::max(1e-12, ymax - ymin) * h;
    os << fmt(px) << "," << fmt(py) << " ";
  }
  os << "\"/>\n";
}

}  // namespace

std::string metrics_csv_row(const std::string& label, const ClassMetrics& m) {
  return label + "," + fmt(m.dice) + "," + fmt(m.iou) + "," + fmt(m.precision) + "," + fmt(m.recall);
}

void emit_report(const std::vector<HistoryRecord>& history, const MetricsReport& metrics,
                 const std::vector<double>& slice_dice, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);

  {
    std::ofstream csv(out_dir / "metrics.csv");
    if (!csv) throw std::runtime_error("emit_report: cannot write metrics.csv");
    csv << "Class,Dice,IoU,Precision,Recall\n";
    for (std::size_t c = 0; c < metrics.per_class.size(); ++c)
      csv << metrics_csv_row(metrics.class_names[c], metrics.per_class[c]) << "\n";
    csv << metrics_csv_row("macro", metrics.macro) << "\n";
  }

  {
    std::ofstream csv(out_dir / "history.csv");
    if (!csv) throw std::runtime_error("emit_report: cannot write history.csv");
    csv << "epoch,step,train_loss,sup_loss,con_loss,prior_loss,val_dice,lr,lambda_t,tau_t\n";
    for (const auto& h : history)
      csv << h.epoch << "," << h.step << "," << fmt(h.train_loss) << "," << fmt(h.sup_loss) << ","
          << fmt(h.con_loss) << "," << fmt(h.prior_loss) << "," << fmt(h.val_dice) << ","
          << fmt(h.lr) << "," << fmt(h.lambda_t) << "," << fmt(h.tau_t) << "\n";
  }

  {
    std::ofstream svg(out_dir / "loss_curves.svg");
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\">\n"
        << "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n"
        << "<text x=\"20\" y=\"20\" font-size=\"14\">train loss (blue), val dice (green) vs epoch</text>\n";
    if (!history.empty()) {
      std::vector<double> xs, loss, dice;
      double lmax = 1e-12;
      for (const auto& h : history) {
        xs.push_back(h.epoch);
        loss.push_back(h.train_loss);
        dice.push_back(h.val_dice);
        lmax = std::max(lmax, h.train_loss);
      }
      write_polyline_svg(svg, xs, loss, 40, 40, 560, 320, xs.front(), std::max(xs.back(), xs.front() + 1e-9),
                         0.0, lmax, "#1f77b4");
      write_polyline_svg(svg, xs, dice, 40, 40, 560, 320, xs.front(), std::max(xs.back(), xs.front() + 1e-9),
                         0.0, 1.0, "#2ca02c");
    }
    svg << "</svg>\n";
  }

  {
    std::ofstream svg(out_dir / "dice_hist.svg");
    constexpr int kBins = 20;
    std::vector<int> bins(kBins, 0);
    for (double d : slice_dice) {
      int b = std::min(kBins - 1, std::max(0, static_cast<int>(d * kBins)));
      ++bins[static_cast<std::size_t>(b)];
    }
    int peak = 1;
    for (int b : bins) peak = std::max(peak, b);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\">\n"
        << "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n"
        << "<text x=\"20\" y=\"20\" font-size=\"14\">per-slice macro Dice histogram</text>\n";
    for (int b = 0; b < kBins; ++b) {
      double h = 320.0 * bins[static_cast<std::size_t>(b)] / peak;
      svg << "<rect x=\"" << fmt(40 + b * 28.0) << "\" y=\"" << fmt(360.0 - h)
          << "\" width=\"24\" height=\"" << fmt(h) << "\" fill=\"#1f77b4\"/>\n";
    }
    svg << "</svg>\n";
  }
}

}  // namespace carotidseg
