#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "rfcnet/gradcheck.hpp"
#include "rfcnet/nn.hpp"

using rfc::ClassMask;
using rfc::ConvKernel;
using rfc::Rng;
using rfc::Shape;
using rfc::Tensor;

namespace {

ConvKernel<double> random_kernel(int in_ch, int out_ch, int k, Rng& rng, bool with_bias,
                                 int stride = 1, int padding = -1) {
  ConvKernel<double> kernel = ConvKernel<double>::init(in_ch, out_ch, k, rng, with_bias, stride, padding);
  if (with_bias) {
    auto b = kernel.bias.data();
    for (auto& v : b) v = rng.uniform(-0.5, 0.5);
  }
  return kernel;
}

}  // namespace

TEST_CASE("conv2d matches a hand-computed 3x3 all-ones case") {
  auto x = Tensor<double>::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  ConvKernel<double> kernel;
  kernel.weights = Tensor<double>::filled({1, 1, 3, 3}, 1.0);
  kernel.stride = 1;
  kernel.padding = 1;
  auto out = rfc::conv2d(x, kernel);
  const std::vector<double> expect{12, 21, 16, 27, 45, 33, 24, 39, 28};
  for (int i = 0; i < 9; ++i) CHECK(out.data()[i] == expect[i]);
}

TEST_CASE("conv2d stride-2 1x1 picks the even grid") {
  auto x = Tensor<double>::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  ConvKernel<double> kernel;
  kernel.weights = Tensor<double>::filled({1, 1, 1, 1}, 2.0);
  kernel.stride = 2;
  kernel.padding = 0;
  auto out = rfc::conv2d(x, kernel);
  REQUIRE(out.shape() == Shape{1, 1, 2, 2});
  CHECK(out.data()[0] == 2.0);
  CHECK(out.data()[1] == 6.0);
  CHECK(out.data()[2] == 14.0);
  CHECK(out.data()[3] == 18.0);
}

TEST_CASE("conv2d matches the loop-nest oracle across random configurations") {
  Rng rng(11);
  struct Case {
    int n, in_ch, out_ch, h, w, k, stride, pad;
    bool bias;
  };
  const Case cases[] = {
      {1, 1, 1, 5, 5, 3, 1, 1, false}, {2, 3, 4, 6, 7, 3, 1, 1, true},
      {1, 2, 3, 9, 5, 5, 1, 2, true},  {1, 4, 2, 8, 8, 3, 2, 1, false},
      {2, 2, 2, 7, 9, 7, 1, 3, true},  {1, 3, 5, 6, 6, 1, 1, 0, true},
      {1, 2, 2, 10, 4, 3, 2, 0, false},
  };
  for (const auto& c : cases) {
    auto x = Tensor<double>::uniform({c.n, c.in_ch, c.h, c.w}, -1.0, 1.0, rng);
    auto kernel = random_kernel(c.in_ch, c.out_ch, c.k, rng, c.bias, c.stride, c.pad);
    auto got = rfc::conv2d(x, kernel);
    oracle::Raw want = oracle::conv2d(oracle::from_tensor(x), oracle::weights_of(kernel),
                                      oracle::bias_of(kernel), c.stride, c.pad);
    REQUIRE(got.shape() == Shape{want.n, want.c, want.h, want.w});
    CHECK(oracle::max_abs_diff(oracle::from_tensor(got), want) < 1e-12);
  }
}

TEST_CASE("conv2d rejects mismatched channels and oversized kernels") {
  Rng rng(3);
  auto x = Tensor<double>::zeros({1, 3, 8, 8});
  auto kernel = ConvKernel<double>::init(4, 2, 3, rng);
  CHECK_THROWS_WITH(rfc::conv2d(x, kernel), Catch::Matchers::ContainsSubstring("channel"));
  auto big = ConvKernel<double>::init(3, 2, 11, rng, true, 1, 0);
  CHECK_THROWS_AS(rfc::conv2d(x, big), rfc::DimensionError);
  CHECK_THROWS_AS(ConvKernel<double>::init(3, 2, 4, rng), rfc::ArgumentError);
}

TEST_CASE("conv2d gradients pass central differences") {
  Rng rng(5);
  auto x = Tensor<double>::uniform({1, 2, 5, 5}, -1.0, 1.0, rng);
  auto kernel = random_kernel(2, 3, 3, rng, true);
  const std::function<Tensor<double>()> f = [&]() { return rfc::sum(rfc::conv2d(x, kernel)); };
  CHECK(rfc::grad_check<double>(f, x, 1e-6) < 1e-6);
  CHECK(rfc::grad_check<double>(f, kernel.weights, 1e-6) < 1e-6);
  CHECK(rfc::grad_check<double>(f, kernel.bias, 1e-6) < 1e-6);

  // Strided + uneven spatial dims.
  auto x2 = Tensor<double>::uniform({2, 2, 7, 5}, -1.0, 1.0, rng);
  auto k2 = random_kernel(2, 2, 3, rng, false, 2, 1);
  const std::function<Tensor<double>()> f2 = [&]() { return rfc::sum(rfc::conv2d(x2, k2)); };
  CHECK(rfc::grad_check<double>(f2, x2, 1e-6) < 1e-6);
  CHECK(rfc::grad_check<double>(f2, k2.weights, 1e-6) < 1e-6);
}

TEST_CASE("concat and slice round-trip with correct gradients") {
  Rng rng(9);
  auto a = Tensor<double>::uniform({2, 2, 3, 3}, -1.0, 1.0, rng);
  auto b = Tensor<double>::uniform({2, 3, 3, 3}, -1.0, 1.0, rng);
  auto cat = rfc::concat_channels<double>({a, b});
  REQUIRE(cat.shape() == Shape{2, 5, 3, 3});
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        CHECK(cat.at(n, 0, y, x) == a.at(n, 0, y, x));
        CHECK(cat.at(n, 2, y, x) == b.at(n, 0, y, x));
        CHECK(cat.at(n, 4, y, x) == b.at(n, 2, y, x));
      }

  auto back = rfc::slice_channels(cat, 2, 3);
  CHECK(oracle::max_abs_diff(oracle::from_tensor(back), oracle::from_tensor(b)) == 0.0);

  const std::function<Tensor<double>()> f = [&]() {
    auto c = rfc::concat_channels<double>({a, b});
    return rfc::sum(rfc::mul(c, c));
  };
  CHECK(rfc::grad_check<double>(f, a, 1e-6) < 1e-6);
  CHECK(rfc::grad_check<double>(f, b, 1e-6) < 1e-6);

  const std::function<Tensor<double>()> g = [&]() {
    auto s = rfc::slice_channels(rfc::concat_channels<double>({a, b}), 1, 2);
    return rfc::sum(rfc::mul(s, s));
  };
  CHECK(rfc::grad_check<double>(g, a, 1e-6) < 1e-6);

  CHECK_THROWS_AS(rfc::slice_channels(cat, 4, 3), rfc::ArgumentError);
  auto odd = Tensor<double>::zeros({2, 1, 4, 3});
  CHECK_THROWS_AS(rfc::concat_channels<double>({a, odd}), rfc::DimensionError);
}

TEST_CASE("maxpool2 values, argmax routing, tie-break and odd edges") {
  auto x = Tensor<double>::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  x.set_requires_grad(true);
  auto out = rfc::maxpool2(x);
  REQUIRE(out.shape() == Shape{1, 1, 2, 2});
  CHECK(out.data()[0] == 5.0);
  CHECK(out.data()[1] == 6.0);
  CHECK(out.data()[2] == 8.0);
  CHECK(out.data()[3] == 9.0);
  rfc::sum(out).backward();
  const std::vector<double> expect_grad{0, 0, 0, 0, 1, 1, 0, 1, 1};
  for (int i = 0; i < 9; ++i) CHECK(x.grad()[i] == expect_grad[i]);

  // All-equal window: gradient goes to the first element in row-major order.
  auto flat = Tensor<double>::filled({1, 1, 2, 2}, 7.0);
  flat.set_requires_grad(true);
  rfc::sum(rfc::maxpool2(flat)).backward();
  CHECK(flat.grad()[0] == 1.0);
  CHECK(flat.grad()[1] == 0.0);
  CHECK(flat.grad()[3] == 0.0);
}

TEST_CASE("maxpool2 matches the window-scan oracle") {
  Rng rng(13);
  for (const auto [h, w] : {std::pair{6, 6}, {5, 7}, {1, 4}, {9, 3}}) {
    auto x = Tensor<double>::uniform({2, 3, h, w}, -1.0, 1.0, rng);
    CHECK(oracle::max_abs_diff(oracle::from_tensor(rfc::maxpool2(x)),
                               oracle::maxpool2(oracle::from_tensor(x))) == 0.0);
  }
}

TEST_CASE("bilinear upsample x2 frozen values and oracle agreement") {
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {0, 2, 4, 6});
  auto out = rfc::bilinear_upsample(x, 2);
  REQUIRE(out.shape() == Shape{1, 1, 4, 4});
  const std::vector<double> expect{0,   0.5, 1.5, 2,    //
                                   1,   1.5, 2.5, 3,    //
                                   3,   3.5, 4.5, 5,    //
                                   4,   4.5, 5.5, 6};
  for (int i = 0; i < 16; ++i) CHECK(out.data()[i] == Catch::Approx(expect[i]).margin(1e-12));

  Rng rng(17);
  for (const int factor : {2, 3, 4}) {
    auto y = Tensor<double>::uniform({2, 2, 3, 4}, -1.0, 1.0, rng);
    CHECK(oracle::max_abs_diff(oracle::from_tensor(rfc::bilinear_upsample(y, factor)),
                               oracle::bilinear_upsample(oracle::from_tensor(y), factor)) < 1e-12);
  }
}

TEST_CASE("bilinear upsample factor 1 is identity but still differentiable") {
  Rng rng(19);
  auto x = Tensor<double>::uniform({1, 2, 3, 3}, -1.0, 1.0, rng);
  x.set_requires_grad(true);
  auto out = rfc::bilinear_upsample(x, 1);
  CHECK(oracle::max_abs_diff(oracle::from_tensor(out), oracle::from_tensor(x)) == 0.0);
  rfc::sum(out).backward();
  CHECK(x.grad()[0] == 1.0);
  CHECK_THROWS_AS(rfc::bilinear_upsample(x, 0), rfc::ArgumentError);
}

TEST_CASE("bilinear upsample gradient passes central differences") {
  Rng rng(23);
  auto x = Tensor<double>::uniform({1, 2, 3, 4}, -1.0, 1.0, rng);
  const std::function<Tensor<double>()> f = [&]() {
    auto u = rfc::bilinear_upsample(x, 4);
    return rfc::sum(rfc::mul(u, u));
  };
  CHECK(rfc::grad_check<double>(f, x, 1e-6) < 1e-6);
}

TEST_CASE("relu forward and strict-positive gradient gate") {
  auto x = Tensor<double>::from_data({1, 1, 1, 4}, {-2, 0, 0.5, 3});
  x.set_requires_grad(true);
  auto out = rfc::relu(x);
  CHECK(out.data()[0] == 0.0);
  CHECK(out.data()[1] == 0.0);
  CHECK(out.data()[2] == 0.5);
  rfc::sum(out).backward();
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);  // exactly zero input: no gradient
  CHECK(x.grad()[2] == 1.0);
  CHECK(x.grad()[3] == 1.0);
}

TEST_CASE("softmax rows sum to one and match frozen two-class case") {
  auto x = Tensor<double>::from_data({1, 2, 1, 1}, {0.0, std::log(3.0)});
  auto sm = rfc::softmax_channels(x);
  CHECK(sm.data()[0] == Catch::Approx(0.25).margin(1e-12));
  CHECK(sm.data()[1] == Catch::Approx(0.75).margin(1e-12));

  Rng rng(29);
  auto y = Tensor<double>::uniform({2, 4, 3, 3}, -3.0, 3.0, rng);
  auto s = rfc::softmax_channels(y);
  for (int n = 0; n < 2; ++n)
    for (int py = 0; py < 3; ++py)
      for (int px = 0; px < 3; ++px) {
        double total = 0.0;
        for (int c = 0; c < 4; ++c) total += s.at(n, c, py, px);
        CHECK(total == Catch::Approx(1.0).margin(1e-12));
      }

  const std::function<Tensor<double>()> f = [&]() {
    auto q = rfc::softmax_channels(y);
    return rfc::sum(rfc::mul(q, q));  // non-uniform pullback exercises the Jacobian
  };
  CHECK(rfc::grad_check<double>(f, y, 1e-6) < 1e-6);
}

TEST_CASE("ce_per_pixel equals the scalar log-sum-exp oracle") {
  // Equal logits over 2 classes: ce = ln 2 regardless of the target.
  auto flat = Tensor<double>::zeros({1, 2, 2, 2});
  ClassMask target = ClassMask::zeros(1, 2, 2);
  target.at(0, 1, 1) = 1;
  auto ce = rfc::ce_per_pixel(flat, target);
  for (int i = 0; i < 4; ++i) CHECK(ce.data()[i] == Catch::Approx(std::log(2.0)).margin(1e-12));

  Rng rng(31);
  auto logits = Tensor<double>::uniform({2, 3, 4, 4}, -4.0, 4.0, rng);
  ClassMask mask = ClassMask::zeros(2, 4, 4);
  for (auto& id : mask.ids) id = rng.uniform_int(0, 2);
  auto got = rfc::ce_per_pixel(logits, mask);
  REQUIRE(got.shape() == Shape{2, 1, 4, 4});
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        std::vector<double> column;
        for (int c = 0; c < 3; ++c) column.push_back(logits.at(n, c, y, x));
        CHECK(got.at(n, 0, y, x) ==
              Catch::Approx(oracle::ce_scalar(column, mask.at(n, y, x))).margin(1e-12));
      }
}

TEST_CASE("ce_per_pixel gradient and validation") {
  Rng rng(37);
  auto logits = Tensor<double>::uniform({1, 3, 3, 3}, -2.0, 2.0, rng);
  ClassMask mask = ClassMask::zeros(1, 3, 3);
  for (auto& id : mask.ids) id = rng.uniform_int(0, 2);
  const std::function<Tensor<double>()> f = [&]() { return rfc::sum(rfc::ce_per_pixel(logits, mask)); };
  CHECK(rfc::grad_check<double>(f, logits, 1e-6) < 1e-6);

  ClassMask bad = ClassMask::zeros(1, 3, 3);
  bad.at(0, 0, 0) = 3;
  CHECK_THROWS_AS(rfc::ce_per_pixel(logits, bad), rfc::ArgumentError);
  ClassMask wrong = ClassMask::zeros(1, 2, 3);
  CHECK_THROWS_AS(rfc::ce_per_pixel(logits, wrong), rfc::DimensionError);
}

TEST_CASE("composite stem pipeline passes central differences") {
  Rng rng(41);
  auto x = Tensor<double>::uniform({1, 3, 8, 8}, 0.05, 1.0, rng);
  auto k1 = random_kernel(3, 2, 3, rng, true);
  auto k2 = random_kernel(2, 2, 3, rng, true);
  const std::function<Tensor<double>()> f = [&]() {
    auto feat = rfc::maxpool2(rfc::relu(rfc::conv2d(x, k1)));
    feat = rfc::maxpool2(rfc::relu(rfc::conv2d(feat, k2)));
    auto up = rfc::bilinear_upsample(feat, 4);
    return rfc::sum(rfc::mul(up, up));
  };
  CHECK(rfc::grad_check<double>(f, x, 1e-6) < 1e-6);
  CHECK(rfc::grad_check<double>(f, k1.weights, 1e-6) < 1e-6);
  CHECK(rfc::grad_check<double>(f, k2.weights, 1e-6) < 1e-6);
  CHECK(rfc::grad_check<double>(f, k2.bias, 1e-6) < 1e-6);
}
