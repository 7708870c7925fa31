#include <doctest.h>

#include "carotidseg/autograd.hpp"
#include "carotidseg/tensor.hpp"
#include "helpers.hpp"

using namespace carotidseg;
using testref::fd_gradient;
using testref::max_rel_error;
using testref::random_tensor;

namespace {

// FD check of a scalar-valued autograd graph with respect to a leaf input.
double check_op(const std::function<ag::Var(const ag::Var&)>& op, const Tensor& x0) {
  ag::Var x = ag::leaf(x0);
  ag::Var y = ag::sum_all(op(x));
  ag::backward(y);
  auto f = [&](const Tensor& t) {
    ag::NoGradGuard ng;
    return static_cast<double>(ag::sum_all(op(ag::constant(t))).value()[0]);
  };
  return max_rel_error(fd_gradient(f, x0, 1e-3), x.grad());
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(t.sum() == doctest::Approx(9.0));
  CHECK_THROWS(Tensor({0, 3}));
  CHECK_THROWS(t.reshaped({4, 2}));
  Tensor r = t.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  t.at(1, 2) = -4.0f;
  CHECK(t.min() == -4.0f);
  CHECK(t.all_finite());
  t[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(11);
  Tensor x = random_tensor({2, 3, 4, 4}, rng, 0.1, 0.9);
  CHECK(check_op([](const ag::Var& v) { return ag::affine(v, 2.5f, -1.0f); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::log_op(v); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::pow_scalar(v, 0.75f); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::sigmoid(v); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::mul(v, v); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::div(ag::affine(v, 1.0f, 2.0f), v); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::abs_op(ag::affine(v, 1.0f, -0.5f)); }, x) < 2e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::relu(ag::affine(v, 1.0f, -0.5f)); }, x) < 2e-3);
}

TEST_CASE("reduction and shape op gradients") {
  Rng rng(12);
  Tensor x = random_tensor({2, 4, 3, 3}, rng, -1.0, 1.0);
  CHECK(check_op([](const ag::Var& v) { return ag::mean_all(v); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::mul(ag::sum_hw(v), ag::sum_hw(v)); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::mul(ag::sum_per_sample(v), ag::sum_per_sample(v)); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::slice_channels(v, 1, 3); }, x) < 1e-3);
  CHECK(check_op(
            [](const ag::Var& v) {
              return ag::concat_channels({ag::slice_channels(v, 0, 2), ag::mul(v, v)});
            },
            x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::global_avg_pool(ag::mul(v, v)); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::pixel_shuffle(v, 2); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::upsample_bilinear2x(ag::mul(v, v)); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::maxpool2x2(ag::mul(v, v)); }, x) < 2e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::softmax_channels(v); }, x) < 1e-3);
  CHECK(check_op([](const ag::Var& v) { return ag::mul_bcast(v, ag::global_avg_pool(v)); }, x) < 1e-3);
}

TEST_CASE("conv2d forward matches the naive reference") {
  Rng rng(13);
  for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, {2, 0, 2}, {1, 0, 1}}) {
    Tensor x = random_tensor({2, 3, 6, 6}, rng, -1.0, 1.0);
    Tensor w = random_tensor({4, 3, k, k}, rng, -0.5, 0.5);
    Tensor b = random_tensor({4}, rng, -0.2, 0.2);
    ag::NoGradGuard ng;
    Tensor got = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(b), stride, pad).value();
    Tensor want = testref::ref_conv2d(x, w, b, stride, pad);
    REQUIRE(got.same_shape(want));
    for (std::int64_t i = 0; i < got.numel(); ++i)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-4));
  }
}

TEST_CASE("conv2d gradients (x, w, b) match finite differences") {
  Rng rng(14);
  Tensor x0 = random_tensor({1, 2, 5, 5}, rng, -1.0, 1.0);
  Tensor w0 = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
  Tensor b0 = random_tensor({3}, rng, -0.2, 0.2);

  ag::Var x = ag::leaf(x0), w = ag::leaf(w0), b = ag::leaf(b0);
  ag::Var y = ag::sum_all(ag::mul(ag::conv2d(x, w, b, 1, 1), ag::conv2d(x, w, b, 1, 1)));
  ag::backward(y);

  auto f_of = [&](int which) {
    return [&, which](const Tensor& t) {
      ag::NoGradGuard ng;
      ag::Var xx = ag::constant(which == 0 ? t : x0);
      ag::Var ww = ag::constant(which == 1 ? t : w0);
      ag::Var bb = ag::constant(which == 2 ? t : b0);
      ag::Var c = ag::conv2d(xx, ww, bb, 1, 1);
      return static_cast<double>(ag::sum_all(ag::mul(c, c)).value()[0]);
    };
  };
  CHECK(max_rel_error(fd_gradient(f_of(0), x0, 1e-3), x.grad()) < 2e-3);
  CHECK(max_rel_error(fd_gradient(f_of(1), w0, 1e-3), w.grad()) < 2e-3);
  CHECK(max_rel_error(fd_gradient(f_of(2), b0, 1e-3), b.grad()) < 2e-3);
}

TEST_CASE("instance_norm and prelu gradients") {
  Rng rng(15);
  Tensor x0 = random_tensor({2, 3, 4, 4}, rng, -1.0, 1.0);
  Tensor g0 = random_tensor({3}, rng, 0.5, 1.5);
  Tensor b0 = random_tensor({3}, rng, -0.3, 0.3);
  {
    ag::Var x = ag::leaf(x0), g = ag::leaf(g0), b = ag::leaf(b0);
    ag::Var y = ag::sum_all(ag::mul(ag::instance_norm(x, g, b), ag::instance_norm(x, g, b)));
    ag::backward(y);
    auto f = [&](const Tensor& t) {
      ag::NoGradGuard ng;
      ag::Var v = ag::instance_norm(ag::constant(t), ag::constant(g0), ag::constant(b0));
      return static_cast<double>(ag::sum_all(ag::mul(v, v)).value()[0]);
    };
    CHECK(max_rel_error(fd_gradient(f, x0, 1e-3), x.grad()) < 5e-3);
    auto fg = [&](const Tensor& t) {
      ag::NoGradGuard ng;
      ag::Var v = ag::instance_norm(ag::constant(x0), ag::constant(t), ag::constant(b0));
      return static_cast<double>(ag::sum_all(ag::mul(v, v)).value()[0]);
    };
    CHECK(max_rel_error(fd_gradient(fg, g0, 1e-3), g.grad()) < 2e-3);
  }
  {
    Tensor a0 = random_tensor({3}, rng, 0.1, 0.4);
    ag::Var x = ag::leaf(x0), a = ag::leaf(a0);
    ag::Var y = ag::sum_all(ag::mul(ag::prelu(x, a), ag::prelu(x, a)));
    ag::backward(y);
    auto f = [&](const Tensor& t) {
      ag::NoGradGuard ng;
      ag::Var v = ag::prelu(ag::constant(t), ag::constant(a0));
      return static_cast<double>(ag::sum_all(ag::mul(v, v)).value()[0]);
    };
    CHECK(max_rel_error(fd_gradient(f, x0, 1e-3), x.grad()) < 2e-3);
    auto fa = [&](const Tensor& t) {
      ag::NoGradGuard ng;
      ag::Var v = ag::prelu(ag::constant(x0), ag::constant(t));
      return static_cast<double>(ag::sum_all(ag::mul(v, v)).value()[0]);
    };
    CHECK(max_rel_error(fd_gradient(fa, a0, 1e-3), a.grad()) < 2e-3);
  }
}

TEST_CASE("pixel_shuffle follows the exact index formula") {
  // 1x1 spatial input with r^2*C' channels lands in raster order
  Tensor x({1, 4, 1, 1});
  for (int i = 0; i < 4; ++i) x[i] = static_cast<float>(i + 1);
  ag::NoGradGuard ng;
  Tensor y = ag::pixel_shuffle(ag::constant(x), 2).value();
  REQUIRE(y.dims() == std::vector<std::int64_t>{1, 1, 2, 2});
  // out[h*r+i, w*r+j, c] = in[(i*r+j)*C'+c] with C'=1
  CHECK(y.at(0, 0, 0, 0) == 1.0f);
  CHECK(y.at(0, 0, 0, 1) == 2.0f);
  CHECK(y.at(0, 0, 1, 0) == 3.0f);
  CHECK(y.at(0, 0, 1, 1) == 4.0f);

  SUBCASE("general case against the index oracle") {
    Rng rng(16);
    int r = 2;
    Tensor in = random_tensor({2, 8, 3, 3}, rng);
    Tensor out = ag::pixel_shuffle(ag::constant(in), r).value();
    std::int64_t Co = 2;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t c = 0; c < Co; ++c)
        for (std::int64_t h = 0; h < 3; ++h)
          for (std::int64_t w = 0; w < 3; ++w)
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < r; ++j)
                CHECK(out.at(n, c, h * r + i, w * r + j) ==
                      in.at(n, (i * r + j) * Co + c, h, w));
  }

  SUBCASE("r=1 is the identity") {
    Rng rng(17);
    Tensor in = random_tensor({1, 3, 2, 2}, rng);
    Tensor out = ag::pixel_shuffle(ag::constant(in), 1).value();
    for (std::int64_t i = 0; i < in.numel(); ++i) CHECK(out[i] == in[i]);
  }

  SUBCASE("channel count not divisible by r^2 fails") {
    CHECK_THROWS(ag::pixel_shuffle(ag::constant(Tensor({1, 3, 2, 2})), 2));
  }
}

TEST_CASE("dropout determinism and scaling") {
  Rng rng(18);
  Tensor x = random_tensor({1, 2, 8, 8}, rng, 1.0, 2.0);
  ag::NoGradGuard ng;
  Tensor a = ag::dropout(ag::constant(x), 0.3f, 42, true).value();
  Tensor b = ag::dropout(ag::constant(x), 0.3f, 42, true).value();
  Tensor c = ag::dropout(ag::constant(x), 0.3f, 43, true).value();
  CHECK(a.storage() == b.storage());
  CHECK(a.storage() != c.storage());
  Tensor off = ag::dropout(ag::constant(x), 0.3f, 7, false).value();
  CHECK(off.storage() == x.storage());
  // inverted scaling: kept entries are x / (1-p)
  int kept = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a[i] != 0.0f) {
      CHECK(a[i] == doctest::Approx(x[i] / 0.7f));
      ++kept;
    }
  }
  CHECK(kept > 0);
  CHECK(kept < a.numel());
}

TEST_CASE("backward handles shared subgraphs (diamond)") {
  Tensor x0({1}, 3.0f);
  ag::Var x = ag::leaf(x0);
  ag::Var y = ag::mul(x, x);            // x^2
  ag::Var z = ag::add(y, ag::mul(y, x));  // x^2 + x^3
  ag::backward(ag::sum_all(z));
  CHECK(x.grad()[0] == doctest::Approx(2 * 3.0 + 3 * 9.0));
}
