#include <doctest.h>

#include <cmath>
#include <set>

#include "carotidseg/prior.hpp"
#include "helpers.hpp"

using namespace carotidseg;
using testref::fd_gradient;
using testref::max_rel_error;

namespace {

// independent labeling oracle: iterate label propagation to a fixed point
int naive_component_count(const Tensor& mask) {
  std::int64_t H = mask.dim(0), W = mask.dim(1);
  std::vector<int> label(static_cast<std::size_t>(H * W), 0);
  int next = 0;
  for (std::int64_t i = 0; i < H * W; ++i)
    if (mask[i] != 0.0f) label[static_cast<std::size_t>(i)] = ++next;
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t c = 0; c < W; ++c) {
        if (mask[r * W + c] == 0.0f) continue;
        int& me = label[static_cast<std::size_t>(r * W + c)];
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            std::int64_t nr = r + dr, nc = c + dc;
            if (nr < 0 || nr >= H || nc < 0 || nc >= W) continue;
            if (mask[nr * W + nc] == 0.0f) continue;
            int other = label[static_cast<std::size_t>(nr * W + nc)];
            if (other < me) {
              me = other;
              changed = true;
            }
          }
      }
  }
  std::set<int> roots;
  for (std::int64_t i = 0; i < H * W; ++i)
    if (mask[i] != 0.0f) roots.insert(label[static_cast<std::size_t>(i)]);
  return static_cast<int>(roots.size());
}

void draw_square(Tensor& m, std::int64_t r0, std::int64_t c0, std::int64_t side) {
  for (std::int64_t r = r0; r < r0 + side; ++r)
    for (std::int64_t c = c0; c < c0 + side; ++c) m.at(r, c) = 1.0f;
}

}  // namespace

TEST_CASE("connected_components") {
  SUBCASE("empty mask has no components") {
    CHECK(connected_components(Tensor::zeros({8, 8})).empty());
  }

  SUBCASE("two disjoint 3x3 squares") {
    Tensor m = Tensor::zeros({12, 12});
    draw_square(m, 1, 1, 3);
    draw_square(m, 7, 7, 3);
    auto comps = connected_components(m);
    REQUIRE(comps.size() == 2);
    CHECK(comps[0].area == 9);
    CHECK(comps[1].area == 9);
    // centroids at the square centers (order by area is stable)
    std::set<std::pair<double, double>> centers{{comps[0].centroid_row, comps[0].centroid_col},
                                                {comps[1].centroid_row, comps[1].centroid_col}};
    CHECK(centers.count({2.0, 2.0}) == 1);
    CHECK(centers.count({8.0, 8.0}) == 1);
  }

  SUBCASE("diagonal touch merges under 8-connectivity") {
    Tensor m = Tensor::zeros({4, 4});
    m.at(0, 0) = 1.0f;
    m.at(1, 1) = 1.0f;
    m.at(2, 2) = 1.0f;
    CHECK(connected_components(m).size() == 1);
  }

  SUBCASE("matches the naive fixed-point oracle on random masks") {
    Rng rng(1);
    for (int i = 0; i < 30; ++i) {
      Tensor m({10, 10});
      for (std::int64_t k = 0; k < 100; ++k) m[k] = rng.bernoulli(0.35) ? 1.0f : 0.0f;
      CHECK(static_cast<int>(connected_components(m).size()) == naive_component_count(m));
    }
  }
}

TEST_CASE("evaluate_prior") {
  PriorConfig cfg;

  SUBCASE("compliant two-vessel layout") {
    Tensor m = Tensor::zeros({64, 64});
    draw_square(m, 30, 10, 5);  // left
    draw_square(m, 32, 50, 5);  // right, centers 2 rows apart
    PriorReport rep = evaluate_prior(m, cfg);
    CHECK(rep.compliant());
    CHECK(rep.left_components == 1);
    CHECK(rep.right_components == 1);
    CHECK(rep.symmetry_deviation == doctest::Approx(2.0));
  }

  SUBCASE("three blobs on the left violate the count") {
    Tensor m = Tensor::zeros({64, 64});
    draw_square(m, 5, 5, 3);
    draw_square(m, 20, 5, 3);
    draw_square(m, 40, 5, 3);
    draw_square(m, 20, 50, 3);
    PriorReport rep = evaluate_prior(m, cfg);
    CHECK(rep.left_components == 3);
    REQUIRE(!rep.violations.empty());
    bool found = false;
    for (const auto& v : rep.violations) found |= v.find("left count > 2") != std::string::npos;
    CHECK(found);
  }

  SUBCASE("row deviation of 25 trips the symmetry threshold of 20") {
    Tensor m = Tensor::zeros({64, 64});
    draw_square(m, 10, 10, 4);  // center row 11.5
    draw_square(m, 35, 50, 4);  // center row 36.5 -> delta 25
    PriorReport rep = evaluate_prior(m, cfg);
    CHECK(rep.symmetry_deviation == doctest::Approx(25.0));
    bool found = false;
    for (const auto& v : rep.violations) found |= v.find("symmetry") != std::string::npos;
    CHECK(found);
    // delta 15 passes
    Tensor ok = Tensor::zeros({64, 64});
    draw_square(ok, 10, 10, 4);
    draw_square(ok, 25, 50, 4);
    CHECK(evaluate_prior(ok, cfg).compliant());
  }

  SUBCASE("empty side reports a count violation and undefined deviation") {
    Tensor m = Tensor::zeros({32, 32});
    draw_square(m, 10, 2, 4);
    PriorReport rep = evaluate_prior(m, cfg);
    CHECK(rep.symmetry_deviation == -1.0);
    CHECK(!rep.compliant());
  }
}

TEST_CASE("prior_loss") {
  PriorConfig cfg;

  SUBCASE("compliant binary mask has zero loss") {
    Tensor m = Tensor::zeros({1, 1, 64, 64});
    for (std::int64_t r = 30; r < 35; ++r)
      for (std::int64_t c = 10; c < 15; ++c) m.at(0, 0, r, c) = 1.0f;
    for (std::int64_t r = 31; r < 36; ++r)
      for (std::int64_t c = 50; c < 55; ++c) m.at(0, 0, r, c) = 1.0f;
    CHECK(prior_loss(ag::constant(m), cfg).value()[0] == doctest::Approx(0.0));
  }

  SUBCASE("soft centroids 30 rows apart give hinge (30-20)/H") {
    std::int64_t H = 64;
    Tensor m = Tensor::zeros({1, 1, H, 64});
    m.at(0, 0, 20, 10) = 1.0f;  // left mass at row 20
    m.at(0, 0, 50, 50) = 1.0f;  // right mass at row 50
    double want = (30.0 - 20.0) / static_cast<double>(H);
    CHECK(prior_loss(ag::constant(m), cfg).value()[0] == doctest::Approx(want).epsilon(1e-4));
  }

  SUBCASE("zero components on one side costs at least 1") {
    Tensor m = Tensor::zeros({1, 1, 32, 32});
    m.at(0, 0, 10, 2) = 1.0f;
    CHECK(prior_loss(ag::constant(m), cfg).value()[0] >= 1.0);
  }

  SUBCASE("loss is zero iff evaluate_prior reports no violations (binary maps)") {
    Rng rng(2);
    for (int i = 0; i < 60; ++i) {
      Tensor hw = Tensor::zeros({24, 24});
      int blobs = static_cast<int>(rng.uniform_int(0, 4));
      for (int b = 0; b < blobs; ++b)
        draw_square(hw, rng.uniform_int(0, 20), rng.uniform_int(0, 20), 3);
      Tensor batch = hw.reshaped({1, 1, 24, 24});
      double loss = prior_loss(ag::constant(batch), cfg).value()[0];
      bool compliant = evaluate_prior(hw, cfg).compliant();
      CHECK((loss < 1e-9) == compliant);
    }
  }

  SUBCASE("symmetry term gradient matches finite differences") {
    Rng rng(3);
    // interior soft map so the binarized component count stays constant
    Tensor p0({1, 1, 8, 8});
    for (std::int64_t i = 0; i < 64; ++i) p0[i] = static_cast<float>(rng.uniform(0.05, 0.45));
    p0.at(0, 0, 1, 1) = 0.8f;  // one left blob
    p0.at(0, 0, 6, 6) = 0.8f;  // one right blob
    PriorConfig small = cfg;
    small.max_row_diff = 1;  // make the hinge active
    ag::Var p = ag::leaf(p0);
    ag::backward(prior_loss(p, small));
    auto f = [&](const Tensor& t) {
      // double reference of the soft symmetry hinge (count term is constant)
      std::int64_t H = 8, W = 8, mid = 4;
      double ml = 0, mr = 0, rl = 0, rr = 0;
      for (std::int64_t r = 0; r < H; ++r)
        for (std::int64_t c = 0; c < W; ++c) {
          double v = t[r * W + c];
          if (c < mid) {
            ml += v;
            rl += v * static_cast<double>(r);
          } else {
            mr += v;
            rr += v * static_cast<double>(r);
          }
        }
      double dev = std::abs(rl / ml - rr / mr);
      double hinge = std::max(0.0, dev - small.max_row_diff) / static_cast<double>(H);
      // the component-count penalty is piecewise constant; add it unchanged
      return hinge;
    };
    CHECK(max_rel_error(fd_gradient(f, p0), p.grad()) < 1e-3);
  }
}

TEST_CASE("prior_filter") {
  PriorConfig cfg;

  SUBCASE("compliant input is unchanged and centers are returned") {
    Tensor m = Tensor::zeros({64, 64});
    draw_square(m, 30, 10, 5);
    draw_square(m, 32, 50, 5);
    PriorFilterResult res = prior_filter(m, cfg);
    CHECK(res.mask.storage() == m.storage());
    CHECK(res.left.detected);
    CHECK(res.right.detected);
    CHECK(res.left.center_row == doctest::Approx(32.0));
    CHECK(res.left.center_col == doctest::Approx(12.0));
    CHECK(res.right.center_row == doctest::Approx(34.0));
  }

  SUBCASE("small distractor far above the vessel is removed") {
    Tensor m = Tensor::zeros({64, 64});
    draw_square(m, 40, 10, 6);  // left vessel, center row 42.5
    draw_square(m, 41, 50, 6);  // right vessel
    draw_square(m, 2, 8, 2);    // distractor high above on the left
    PriorFilterResult res = prior_filter(m, cfg);
    CHECK(res.left.kept.size() == 1);
    CHECK(res.left.center_row == doctest::Approx(42.5));
    // distractor pixels removed from the mask
    CHECK(res.mask.at(2, 8) == 0.0f);
    CHECK(res.mask.at(42, 12) == 1.0f);
  }

  SUBCASE("empty side yields a detection-failed flag, not an exception") {
    Tensor m = Tensor::zeros({32, 32});
    draw_square(m, 10, 2, 4);
    PriorFilterResult res = prior_filter(m, cfg);
    CHECK(res.left.detected);
    CHECK_FALSE(res.right.detected);
  }

  SUBCASE("keeps at most two components per side") {
    Rng rng(4);
    for (int i = 0; i < 30; ++i) {
      Tensor m = Tensor::zeros({32, 32});
      int blobs = static_cast<int>(rng.uniform_int(0, 6));
      for (int b = 0; b < blobs; ++b)
        draw_square(m, rng.uniform_int(0, 28), rng.uniform_int(0, 28), 3);
      PriorFilterResult res = prior_filter(m, cfg);
      CHECK(res.left.kept.size() <= 2);
      CHECK(res.right.kept.size() <= 2);
    }
  }

  SUBCASE("idempotent") {
    Rng rng(5);
    for (int i = 0; i < 30; ++i) {
      Tensor m = Tensor::zeros({32, 32});
      int blobs = static_cast<int>(rng.uniform_int(1, 6));
      for (int b = 0; b < blobs; ++b)
        draw_square(m, rng.uniform_int(0, 28), rng.uniform_int(0, 28), 3);
      PriorFilterResult once = prior_filter(m, cfg);
      PriorFilterResult twice = prior_filter(once.mask, cfg);
      CHECK(twice.mask.storage() == once.mask.storage());
    }
  }

  SUBCASE("bifurcation: two same-side components are both kept") {
    Tensor m = Tensor::zeros({64, 64});
    draw_square(m, 20, 10, 4);  // left branch A, center 21.5
    draw_square(m, 40, 10, 4);  // left branch B, center 41.5 (mean 31.5)
    draw_square(m, 30, 50, 4);  // right vessel, center 31.5
    PriorFilterResult res = prior_filter(m, cfg);
    CHECK(res.left.kept.size() == 2);
    CHECK(res.left.center_row == doctest::Approx(31.5));
  }
}
