#include "carotidseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "carotidseg/rng.hpp"
#include "carotidseg/volume_io.hpp"

namespace carotidseg {

void PhantomSpec::validate() const {
  if (n_patients < 0 || slices_per_patient <= 0) throw std::invalid_argument("phantom: counts must be positive");
  if (height < 32 || width < 32) throw std::invalid_argument("phantom: image size too small (min 32)");
  if (plaque_probability < 0.0 || plaque_probability > 1.0)
    throw std::invalid_argument("phantom: plaque_probability not in [0,1]");
  if (labeled_fraction < 0.0 || labeled_fraction > 1.0)
    throw std::invalid_argument("phantom: labeled_fraction not in [0,1]");
  if (distractor_rate < 0.0) throw std::invalid_argument("phantom: distractor_rate < 0");
  if (n_sequences < 1) throw std::invalid_argument("phantom: n_sequences < 1");
}

double PhantomSpec::noise_for(int seq) const {
  if (noise_std.empty()) return 0.03;
  return noise_std[static_cast<std::size_t>(seq) % noise_std.size()];
}

namespace {

enum Tissue { kBg = 0, kLumen = 1, kWall = 2, kPlaque = 3, kDistractor = 4 };

// tissue -> mean intensity, one row per sequence (PDw, T1w, T1ce, T2w, TOF).
// The last row is the flow sequence: lumen bright, which lets fusion
// disambiguate lumen from wall. Plaque separates from wall on T1w/T1ce/T2w.
constexpr double kProfiles[5][5] = {
    //  bg    lumen  wall  plaque distractor
    {0.25, 0.15, 0.75, 0.55, 0.65},  // PDw
    {0.30, 0.20, 0.60, 0.78, 0.60},  // T1w
    {0.28, 0.24, 0.55, 0.82, 0.70},  // T1ce
    {0.22, 0.18, 0.65, 0.40, 0.60},  // T2w
    {0.20, 0.90, 0.45, 0.50, 0.55},  // TOF (flow)
};

struct VesselGeom {
  double row = 0, col = 0, r_out = 0, r_in = 0;
  bool has_plaque = false;
  double plaque_angle = 0, plaque_r = 0;
};

struct SliceGeom {
  std::vector<VesselGeom> left, right;
  std::vector<std::array<double, 3>> distractors;  // row, col, radius
};

struct SliceOverrides {
  bool occluded = false;        // flow-sequence lumen matches wall intensity
  bool bifurcate_left = false;  // two components on the left side
  int forced_distractors = -1;
};

double dist2(double r1, double c1, double r2, double c2) {
  double dr = r1 - r2, dc = c1 - c2;
  return dr * dr + dc * dc;
}

VesselGeom draw_vessel(double row, double col, double s, double plaque_prob, Rng& rng) {
  VesselGeom v;
  v.row = row;
  v.col = col;
  v.r_out = std::max(3.0, (10.0 + rng.uniform(0.0, 6.0)) * s);
  v.r_in = v.r_out * (0.45 + rng.uniform(0.0, 0.2));
  v.has_plaque = rng.bernoulli(plaque_prob);
  v.plaque_angle = rng.uniform(0.0, 2.0 * M_PI);
  v.plaque_r = v.r_out * (0.5 + rng.uniform(0.0, 0.3));
  return v;
}

SliceGeom draw_slice_geom(const PhantomSpec& spec, double base_row, double base_col_l,
                          double base_col_r, Rng& rng, const SliceOverrides& ov) {
  std::int64_t H = spec.height, W = spec.width;
  double s = static_cast<double>(std::min(H, W)) / 256.0;
  SliceGeom g;

  double jr = rng.uniform(-2.0, 2.0) * s;  // joint row jitter keeps |drow| small
  double row_l = base_row + jr;
  double drow = rng.uniform(-8.0, 8.0) * s;
  double row_r = row_l + drow;
  double col_l = base_col_l + rng.uniform(-3.0, 3.0) * s;
  double col_r = base_col_r + rng.uniform(-3.0, 3.0) * s;

  if (ov.bifurcate_left) {
    // two equal branches, symmetric about row_l so the side centroid stays put
    VesselGeom a = draw_vessel(row_l, col_l, s * 0.8, spec.plaque_probability, rng);
    VesselGeom b = a;
    double sep = a.r_out * 2.6;
    a.row = row_l - sep / 2.0;
    b.row = row_l + sep / 2.0;
    b.has_plaque = false;
    g.left = {a, b};
  } else {
    g.left = {draw_vessel(row_l, col_l, s, spec.plaque_probability, rng)};
  }
  g.right = {draw_vessel(row_r, col_r, s, spec.plaque_probability, rng)};

  int n_distract = ov.forced_distractors >= 0
                       ? ov.forced_distractors
                       : static_cast<int>(rng.poisson(spec.distractor_rate));
  for (int d = 0; d < n_distract; ++d) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      double dr_row = rng.uniform(0.12 * H, 0.88 * H);
      double dr_col = rng.uniform(0.08 * W, 0.92 * W);
      double rad = (2.0 + rng.uniform(0.0, 4.0)) * s;
      bool clear = true;
      for (const auto& side : {g.left, g.right})
        for (const auto& v : side)
          if (dist2(dr_row, dr_col, v.row, v.col) < std::pow(2.5 * v.r_out + rad, 2)) clear = false;
      if (clear) {
        g.distractors.push_back({dr_row, dr_col, rad});
        break;
      }
    }
  }
  return g;
}

void rasterize(const SliceGeom& g, std::int64_t H, std::int64_t W, std::vector<std::uint8_t>& tissue) {
  tissue.assign(static_cast<std::size_t>(H * W), kBg);
  auto put = [&](std::int64_t r, std::int64_t c, std::uint8_t t) {
    if (r >= 0 && r < H && c >= 0 && c < W) tissue[static_cast<std::size_t>(r * W + c)] = t;
  };

  for (const auto& d : g.distractors) {
    std::int64_t rad = static_cast<std::int64_t>(std::ceil(d[2]));
    for (std::int64_t r = static_cast<std::int64_t>(d[0]) - rad; r <= static_cast<std::int64_t>(d[0]) + rad; ++r)
      for (std::int64_t c = static_cast<std::int64_t>(d[1]) - rad; c <= static_cast<std::int64_t>(d[1]) + rad; ++c)
        if (dist2(r, c, d[0], d[1]) <= d[2] * d[2]) put(r, c, kDistractor);
  }

  std::vector<VesselGeom> all;
  all.insert(all.end(), g.left.begin(), g.left.end());
  all.insert(all.end(), g.right.begin(), g.right.end());
  for (const auto& v : all) {
    std::int64_t rad = static_cast<std::int64_t>(std::ceil(v.r_out)) + 1;
    for (std::int64_t r = static_cast<std::int64_t>(v.row) - rad; r <= static_cast<std::int64_t>(v.row) + rad; ++r)
      for (std::int64_t c = static_cast<std::int64_t>(v.col) - rad; c <= static_cast<std::int64_t>(v.col) + rad; ++c) {
        double d2 = dist2(r, c, v.row, v.col);
        if (d2 <= v.r_in * v.r_in)
          put(r, c, kLumen);
        else if (d2 <= v.r_out * v.r_out)
          put(r, c, kWall);
      }
    if (v.has_plaque) {
      double ring = (v.r_out + v.r_in) / 2.0;
      double pr = v.row + std::sin(v.plaque_angle) * ring;
      double pc = v.col + std::cos(v.plaque_angle) * ring;
      std::int64_t rad_p = static_cast<std::int64_t>(std::ceil(v.plaque_r)) + 1;
      double bound = 1.9 * v.r_out;  // plaque stays annulus-adjacent
      for (std::int64_t r = static_cast<std::int64_t>(pr) - rad_p; r <= static_cast<std::int64_t>(pr) + rad_p; ++r)
        for (std::int64_t c = static_cast<std::int64_t>(pc) - rad_p; c <= static_cast<std::int64_t>(pc) + rad_p; ++c) {
          if (dist2(r, c, pr, pc) > v.plaque_r * v.plaque_r) continue;
          double dv = dist2(r, c, v.row, v.col);
          if (dv >= v.r_in * v.r_in && dv <= bound * bound) put(r, c, kPlaque);
        }
    }
  }
}

Tensor render_sequence(const std::vector<std::uint8_t>& tissue, std::int64_t H, std::int64_t W,
                       int seq, double noise_std, bool occluded, Rng& rng) {
  int prof = seq % 5;
  Tensor img({H, W});
  for (std::int64_t i = 0; i < H * W; ++i) {
    int t = tissue[static_cast<std::size_t>(i)];
    double mean = kProfiles[prof][t];
    if (occluded && prof == 4 && t == kLumen) mean = kProfiles[prof][kWall];  // no flow signal
    double v = mean + (noise_std > 0.0 ? rng.normal(0.0, noise_std) : 0.0);
    img[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return img;
}

Tensor label_map_of(const std::vector<std::uint8_t>& tissue, std::int64_t H, std::int64_t W,
                    ClassScheme scheme) {
  Tensor lm({H, W});
  for (std::int64_t i = 0; i < H * W; ++i) {
    int t = tissue[static_cast<std::size_t>(i)];
    float code = 0.0f;
    if (t == kWall) code = 1.0f;
    if (t == kPlaque) code = scheme == ClassScheme::multiclass ? 2.0f : 1.0f;
    lm[i] = code;
  }
  return lm;
}

MultiSequenceSlice make_case_slice(const PhantomSpec& spec, std::uint64_t seed,
                                   const SliceOverrides& ov, const std::string& id) {
  Rng rng(seed);
  double s = static_cast<double>(std::min(spec.height, spec.width)) / 256.0;
  (void)s;
  SliceGeom g = draw_slice_geom(spec, spec.height / 2.0, spec.width * 0.27, spec.width * 0.73, rng, ov);
  std::vector<std::uint8_t> tissue;
  rasterize(g, spec.height, spec.width, tissue);
  MultiSequenceSlice sl;
  sl.patient_id = id;
  sl.slice_index = 0;
  for (int seq = 0; seq < spec.n_sequences; ++seq)
    sl.images.push_back(render_sequence(tissue, spec.height, spec.width, seq, spec.noise_for(seq),
                                        ov.occluded, rng));
  sl.mask = SegmentationMask::from_label_map(label_map_of(tissue, spec.height, spec.width, spec.class_scheme),
                                             spec.class_scheme);
  return sl;
}

}  // namespace

DatasetManifest generate_phantom(const PhantomSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);

  DatasetManifest m;
  m.base_dir = out_dir;
  m.class_scheme = spec.class_scheme;
  auto names = default_sequence_names();
  for (int j = 0; j < spec.n_sequences; ++j)
    m.sequence_names.push_back(j < static_cast<int>(names.size())
                                   ? names[static_cast<std::size_t>(j)]
                                   : "SEQ" + std::to_string(j));

  std::int64_t H = spec.height, W = spec.width;
  for (int p = 0; p < spec.n_patients; ++p) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(p)));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%03d", p);
    std::string pid(buf);
    std::filesystem::create_directories(out_dir / pid);

    double base_row = H / 2.0 + rng.uniform(-0.06, 0.06) * H;
    double base_col_l = W * 0.27 + rng.uniform(-0.04, 0.04) * W;
    double base_col_r = W * 0.73 + rng.uniform(-0.04, 0.04) * W;

    int K = spec.slices_per_patient;
    std::vector<std::vector<std::uint8_t>> tissues(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      SliceGeom g = draw_slice_geom(spec, base_row, base_col_l, base_col_r, rng, {});
      rasterize(g, H, W, tissues[static_cast<std::size_t>(k)]);
    }

    PatientEntry entry;
    entry.id = pid;
    for (int seq = 0; seq < spec.n_sequences; ++seq) {
      Volume v = Volume::zeros(K, H, W);
      for (int k = 0; k < K; ++k)
        v.set_slice(k, render_sequence(tissues[static_cast<std::size_t>(k)], H, W, seq,
                                       spec.noise_for(seq), false, rng));
      std::string rel = pid + "/" + m.sequence_names[static_cast<std::size_t>(seq)] + ".rvol";
      save_volume(v, out_dir / rel);
      entry.volumes[m.sequence_names[static_cast<std::size_t>(seq)]] = rel;
    }

    int n_labeled = static_cast<int>(std::llround(spec.labeled_fraction * K));
    n_labeled = std::clamp(n_labeled, 0, K);
    std::vector<int> idx(static_cast<std::size_t>(K));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(static_cast<std::size_t>(n_labeled));
    std::sort(idx.begin(), idx.end());
    entry.labeled_slices = idx;

    if (n_labeled > 0) {
      Volume mv = Volume::zeros(K, H, W);
      for (int k : idx)
        mv.set_slice(k, label_map_of(tissues[static_cast<std::size_t>(k)], H, W, spec.class_scheme));
      std::string rel = pid + "/mask.rvol";
      save_volume(mv, out_dir / rel);
      entry.mask = rel;
    }
    m.patients.push_back(std::move(entry));
  }

  save_manifest(m, out_dir / "manifest.json");
  return load_manifest(out_dir / "manifest.json");
}

std::vector<PhantomCase> phantom_case_catalog() {
  PhantomSpec spec;
  spec.height = 128;
  spec.width = 128;
  spec.plaque_probability = 1.0;
  spec.distractor_rate = 0.0;
  spec.noise_std = {0.01, 0.01, 0.01, 0.01, 0.01};

  std::vector<PhantomCase> cases;

  {
    SliceOverrides ov;
    ov.occluded = true;
    cases.push_back({"occluded_lumen",
                     "completely occluded carotid: no flow signal, lumen matches wall intensity "
                     "on the flow sequence",
                     make_case_slice(spec, 101, ov, "case_occluded")});
  }
  {
    PhantomSpec noisy = spec;
    noisy.noise_std = {0.15, 0.15, 0.15, 0.15, 0.15};
    cases.push_back({"heavy_noise", "strong acquisition noise on all sequences",
                     make_case_slice(noisy, 102, {}, "case_noise")});
  }
  {
    SliceOverrides ov;
    ov.bifurcate_left = true;
    cases.push_back({"bifurcation",
                     "left carotid bifurcated into two components (count prior still satisfied)",
                     make_case_slice(spec, 103, ov, "case_bifurcation")});
  }
  {
    SliceOverrides ov;
    ov.forced_distractors = 4;
    cases.push_back({"distractor_cluster", "several bright non-vessel blobs",
                     make_case_slice(spec, 104, ov, "case_distractors")});
  }
  return cases;
}

}  // namespace carotidseg
