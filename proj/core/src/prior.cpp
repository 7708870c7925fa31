#include "carotidseg/prior.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>

namespace carotidseg {

void PriorConfig::validate() const {
  if (max_row_diff <= 0 || binarize_threshold <= 0.0) throw std::invalid_argument("prior: thresholds must be positive");
  if (min_components_per_side < 0 || max_components_per_side < min_components_per_side)
    throw std::invalid_argument("prior: bad component bounds");
}

std::vector<Component> connected_components(const Tensor& binary_hw) {
  if (binary_hw.rank() != 2) throw std::invalid_argument("connected_components: expected (H,W)");
  std::int64_t H = binary_hw.dim(0), W = binary_hw.dim(1);
  std::vector<std::int32_t> label(static_cast<std::size_t>(H * W), -1);
  std::vector<Component> comps;

  std::deque<std::int64_t> queue;
  for (std::int64_t start = 0; start < H * W; ++start) {
    if (binary_hw[start] == 0.0f || label[static_cast<std::size_t>(start)] >= 0) continue;
    std::int32_t id = static_cast<std::int32_t>(comps.size());
    Component comp;
    double sr = 0.0, sc = 0.0;
    queue.push_back(start);
    label[static_cast<std::size_t>(start)] = id;
    while (!queue.empty()) {
      std::int64_t cur = queue.front();
      queue.pop_front();
      std::int64_t r = cur / W, c = cur % W;
      ++comp.area;
      sr += static_cast<double>(r);
      sc += static_cast<double>(c);
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          std::int64_t nr = r + dr, nc = c + dc;
          if (nr < 0 || nr >= H || nc < 0 || nc >= W) continue;
          std::int64_t k = nr * W + nc;
          if (binary_hw[k] != 0.0f && label[static_cast<std::size_t>(k)] < 0) {
            label[static_cast<std::size_t>(k)] = id;
            queue.push_back(k);
          }
        }
    }
    comp.centroid_row = sr / static_cast<double>(comp.area);
    comp.centroid_col = sc / static_cast<double>(comp.area);
    comps.push_back(comp);
  }
  std::stable_sort(comps.begin(), comps.end(),
                   [](const Component& a, const Component& b) { return a.area > b.area; });
  return comps;
}

namespace {

Tensor binarize(const Tensor& prob, double thr) {
  Tensor out = prob;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] >= static_cast<float>(thr) ? 1.0f : 0.0f;
  return out;
}

Tensor side_of(const Tensor& mask, bool left) {
  std::int64_t H = mask.dim(0), W = mask.dim(1), mid = W / 2;
  Tensor out = Tensor::zeros({H, W});
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = left ? 0 : mid; c < (left ? mid : W); ++c) out.at(r, c) = mask.at(r, c);
  return out;
}

double weighted_center_row(const std::vector<Component>& comps) {
  double num = 0.0, den = 0.0;
  for (const auto& c : comps) {
    num += c.centroid_row * static_cast<double>(c.area);
    den += static_cast<double>(c.area);
  }
  return den > 0.0 ? num / den : 0.0;
}

}  // namespace

PriorReport evaluate_prior(const Tensor& prob_map_hw, const PriorConfig& cfg) {
  cfg.validate();
  if (prob_map_hw.rank() != 2) throw std::invalid_argument("evaluate_prior: expected (H,W)");
  Tensor bin = binarize(prob_map_hw, cfg.binarize_threshold);
  auto left = connected_components(side_of(bin, true));
  auto right = connected_components(side_of(bin, false));

  PriorReport rep;
  rep.left_components = static_cast<int>(left.size());
  rep.right_components = static_cast<int>(right.size());
  for (const auto& c : left) rep.left_centers.emplace_back(c.centroid_row, c.centroid_col);
  for (const auto& c : right) rep.right_centers.emplace_back(c.centroid_row, c.centroid_col);

  auto check_count = [&](int n, const char* name) {
    if (n < cfg.min_components_per_side)
      rep.violations.push_back(std::string(name) + " count < " + std::to_string(cfg.min_components_per_side));
    if (n > cfg.max_components_per_side)
      rep.violations.push_back(std::string(name) + " count > " + std::to_string(cfg.max_components_per_side));
  };
  check_count(rep.left_components, "left");
  check_count(rep.right_components, "right");

  if (!left.empty() && !right.empty()) {
    rep.symmetry_deviation = std::abs(weighted_center_row(left) - weighted_center_row(right));
    if (rep.symmetry_deviation > static_cast<double>(cfg.max_row_diff))
      rep.violations.push_back("symmetry deviation " + std::to_string(rep.symmetry_deviation) +
                               " > " + std::to_string(cfg.max_row_diff));
  } else {
    rep.symmetry_deviation = -1.0;
  }
  return rep;
}

ag::Var prior_loss(const ag::Var& prob_map, const PriorConfig& cfg) {
  cfg.validate();
  const Tensor& pv = prob_map.value();
  if (pv.rank() != 4 || pv.dim(1) != 1) throw std::invalid_argument("prior_loss: expected (N,1,H,W)");
  std::int64_t N = pv.dim(0), H = pv.dim(2), W = pv.dim(3), mid = W / 2;

  // row-coordinate and side-indicator constants, broadcast over the batch
  Tensor left_ind({N, 1, H, W}), right_ind({N, 1, H, W});
  Tensor left_row({N, 1, H, W}), right_row({N, 1, H, W});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t c = 0; c < W; ++c) {
        bool l = c < mid;
        left_ind.at(n, 0, r, c) = l ? 1.0f : 0.0f;
        right_ind.at(n, 0, r, c) = l ? 0.0f : 1.0f;
        left_row.at(n, 0, r, c) = l ? static_cast<float>(r) : 0.0f;
        right_row.at(n, 0, r, c) = l ? 0.0f : static_cast<float>(r);
      }

  constexpr float kMinMass = 1e-6f;
  ag::Var mass_l = ag::clamp(ag::sum_per_sample(ag::mul(prob_map, ag::constant(left_ind))), kMinMass, 3e38f);
  ag::Var mass_r = ag::clamp(ag::sum_per_sample(ag::mul(prob_map, ag::constant(right_ind))), kMinMass, 3e38f);
  ag::Var row_l = ag::div(ag::sum_per_sample(ag::mul(prob_map, ag::constant(left_row))), mass_l);
  ag::Var row_r = ag::div(ag::sum_per_sample(ag::mul(prob_map, ag::constant(right_row))), mass_r);
  ag::Var dev = ag::abs_op(ag::sub(row_l, row_r));
  ag::Var hinge = ag::relu(ag::affine(dev, 1.0f, -static_cast<float>(cfg.max_row_diff)));
  ag::Var sym = ag::affine(hinge, 1.0f / static_cast<float>(H), 0.0f);  // (N,1,1,1)

  // sides with (near) zero probability mass carry no symmetry gradient; the
  // count penalty below reports them instead
  Tensor sym_valid({N, 1, 1, 1});
  Tensor count_pen({N, 1, 1, 1});
  for (std::int64_t n = 0; n < N; ++n) {
    Tensor slice_hw({H, W});
    std::copy_n(pv.data() + n * H * W, H * W, slice_hw.data());
    Tensor bin = binarize(slice_hw, cfg.binarize_threshold);
    auto left = connected_components(side_of(bin, true));
    auto right = connected_components(side_of(bin, false));
    double pen = 0.0;
    for (int cnt : {static_cast<int>(left.size()), static_cast<int>(right.size())}) {
      pen += std::max(0, cnt - cfg.max_components_per_side);
      pen += std::max(0, cfg.min_components_per_side - cnt);
    }
    count_pen[n] = static_cast<float>(pen);

    double ml = 0.0, mr = 0.0;
    for (std::int64_t i = 0; i < H * W; ++i) {
      if (left_ind[n * H * W + i] > 0.0f) ml += pv[n * H * W + i];
      else mr += pv[n * H * W + i];
    }
    sym_valid[n] = (ml > kMinMass && mr > kMinMass) ? 1.0f : 0.0f;
  }

  ag::Var total = ag::add(ag::mul(sym, ag::constant(sym_valid)), ag::constant(count_pen));
  return ag::affine(ag::sum_all(total), 1.0f / static_cast<float>(N), 0.0f);
}

PriorFilterResult prior_filter(const Tensor& prob_map_hw, const PriorConfig& cfg) {
  cfg.validate();
  if (prob_map_hw.rank() != 2) throw std::invalid_argument("prior_filter: expected (H,W)");
  std::int64_t H = prob_map_hw.dim(0), W = prob_map_hw.dim(1);
  Tensor bin = binarize(prob_map_hw, cfg.binarize_threshold);
  Tensor left_side = side_of(bin, true), right_side = side_of(bin, false);

  // labeling pass mirroring connected_components but keeping pixel lists so
  // the filtered mask can be rebuilt
  auto comps_with_pixels = [&](const Tensor& side) {
    std::vector<std::pair<Component, std::vector<std::int64_t>>> out;
    std::vector<std::int32_t> label(static_cast<std::size_t>(H * W), -1);
    std::deque<std::int64_t> queue;
    for (std::int64_t start = 0; start < H * W; ++start) {
      if (side[start] == 0.0f || label[static_cast<std::size_t>(start)] >= 0) continue;
      std::int32_t id = static_cast<std::int32_t>(out.size());
      Component comp;
      std::vector<std::int64_t> pixels;
      double sr = 0.0, sc = 0.0;
      queue.push_back(start);
      label[static_cast<std::size_t>(start)] = id;
      while (!queue.empty()) {
        std::int64_t cur = queue.front();
        queue.pop_front();
        std::int64_t r = cur / W, c = cur % W;
        ++comp.area;
        pixels.push_back(cur);
        sr += static_cast<double>(r);
        sc += static_cast<double>(c);
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc == 0) continue;
            std::int64_t nr = r + dr, nc = c + dc;
            if (nr < 0 || nr >= H || nc < 0 || nc >= W) continue;
            std::int64_t k = nr * W + nc;
            if (side[k] != 0.0f && label[static_cast<std::size_t>(k)] < 0) {
              label[static_cast<std::size_t>(k)] = id;
              queue.push_back(k);
            }
          }
      }
      comp.centroid_row = sr / static_cast<double>(comp.area);
      comp.centroid_col = sc / static_cast<double>(comp.area);
      out.emplace_back(comp, std::move(pixels));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const auto& a, const auto& b) { return a.first.area > b.first.area; });
    return out;
  };

  auto left_all = comps_with_pixels(left_side);
  auto right_all = comps_with_pixels(right_side);

  auto other_row = [&](const auto& other) {
    std::vector<Component> cs;
    for (const auto& [c, px] : other) cs.push_back(c);
    return weighted_center_row(cs);
  };

  // candidate set: the max_components_per_side largest; among equal areas keep
  // those whose centroid row is closest to the other side's center row
  auto take_candidates = [&](auto& all, double other_center) {
    std::stable_sort(all.begin(), all.end(), [&](const auto& a, const auto& b) {
      if (a.first.area != b.first.area) return a.first.area > b.first.area;
      return std::abs(a.first.centroid_row - other_center) < std::abs(b.first.centroid_row - other_center);
    });
    if (static_cast<int>(all.size()) > cfg.max_components_per_side)
      all.resize(static_cast<std::size_t>(cfg.max_components_per_side));
  };
  take_candidates(left_all, other_row(right_all));
  take_candidates(right_all, other_row(left_all));

  // pick the valid (symmetry-satisfying) non-empty subset pair with maximal
  // area; ties prefer more components, then smaller deviation
  auto subsets = [](std::size_t n) {
    std::vector<std::vector<std::size_t>> out;
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
      std::vector<std::size_t> s;
      for (std::size_t i = 0; i < n; ++i)
        if (mask & (1u << i)) s.push_back(i);
      out.push_back(std::move(s));
    }
    return out;
  };

  std::vector<std::size_t> best_l, best_r;
  if (!left_all.empty() && !right_all.empty()) {
    double best_area = -1.0;
    std::size_t best_count = 0;
    double best_dev = 0.0;
    for (const auto& sl : subsets(left_all.size()))
      for (const auto& sr : subsets(right_all.size())) {
        std::vector<Component> cl, cr;
        double area = 0.0;
        for (auto i : sl) { cl.push_back(left_all[i].first); area += static_cast<double>(left_all[i].first.area); }
        for (auto i : sr) { cr.push_back(right_all[i].first); area += static_cast<double>(right_all[i].first.area); }
        double dev = std::abs(weighted_center_row(cl) - weighted_center_row(cr));
        if (dev > static_cast<double>(cfg.max_row_diff)) continue;
        std::size_t count = sl.size() + sr.size();
        bool better = area > best_area || (area == best_area && count > best_count) ||
                      (area == best_area && count == best_count && dev < best_dev);
        if (better) {
          best_area = area;
          best_count = count;
          best_dev = dev;
          best_l = sl;
          best_r = sr;
        }
      }
  }
  if (best_l.empty() && best_r.empty()) {
    // no symmetric combination (or an empty side): keep all candidates
    best_l.resize(left_all.size());
    best_r.resize(right_all.size());
    for (std::size_t i = 0; i < best_l.size(); ++i) best_l[i] = i;
    for (std::size_t i = 0; i < best_r.size(); ++i) best_r[i] = i;
  }

  PriorFilterResult res;
  res.mask = Tensor::zeros({H, W});
  auto fill_side = [&](const auto& all, const std::vector<std::size_t>& keep, SideDetection& det) {
    double num_r = 0.0, num_c = 0.0, den = 0.0;
    for (auto i : keep) {
      const auto& [comp, pixels] = all[i];
      det.kept.push_back(comp);
      for (auto px : pixels) res.mask[px] = 1.0f;
      num_r += comp.centroid_row * static_cast<double>(comp.area);
      num_c += comp.centroid_col * static_cast<double>(comp.area);
      den += static_cast<double>(comp.area);
    }
    if (den > 0.0) {
      det.detected = true;
      det.center_row = num_r / den;
      det.center_col = num_c / den;
    }
  };
  fill_side(left_all, best_l, res.left);
  fill_side(right_all, best_r, res.right);
  return res;
}

}  // namespace carotidseg
