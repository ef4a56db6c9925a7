#include <cmath>

#include "doctest.h"
#include "ffce/gradcheck.hpp"
#include "ffce/ops.hpp"

using namespace ffce;

namespace {

Tensor<double> rnd(Rng& rng, Shape s) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.normal();
  return Tensor<double>::from(std::move(s), std::move(v));
}

std::vector<double> vec(Tensor<double> t) {
  return {t.values().begin(), t.values().end()};
}

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("backward through sums and products") {
  ParamStore<double> ps;
  auto p = ps.add("p", Tensor<double>::from({4}, {1.5, -2.0, 0.25, 3.0}));

  backward(sum_all(p));
  for (double g : p.grad()) CHECK(g == doctest::Approx(1.0));

  p.zero_grad();
  backward(sum_all(mul(p, p)));
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(p.grad()[i] == doctest::Approx(2.0 * p.values()[i]));
}

TEST_CASE("shared subexpression accumulates both paths") {
  ParamStore<double> ps;
  auto x = ps.add("x", Tensor<double>::from({3}, {0.5, -1.0, 2.0}));
  auto fn = [&] {
    auto s = mul(x, x);
    return sum_all(add(s, s));  // d/dx = 4x through two uses of s
  };
  backward(fn());
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(x.grad()[i] == doctest::Approx(4.0 * x.values()[i]));

  ps.zero_grad();
  auto res = grad_check<double>(fn, ps);
  CHECK(res.ok());
}

TEST_CASE("backward rejects non-scalar roots") {
  ParamStore<double> ps;
  auto x = ps.add("x", Tensor<double>::from({2}, {1.0, 2.0}));
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("convolution: identity kernel, box kernel, shape guards") {
  Rng rng(11);
  auto x = rnd(rng, {1, 3, 4, 4});
  std::vector<double> eye(3 * 3, 0.0);
  for (std::size_t c = 0; c < 3; ++c) eye[c * 3 + c] = 1.0;
  auto k = Tensor<double>::from({3, 3, 1, 1}, std::move(eye));
  auto y = conv2d(x, k, Tensor<double>::zeros({3}), 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);

  // all-ones 3x3 kernel, pad 1, all-ones input: output counts the window size
  auto ones = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto box = conv2d(Tensor<double>::full({1, 1, 3, 3}, 1.0), ones, Tensor<double>::zeros({1}), 1, 1);
  CHECK(box.at({0, 0, 1, 1}) == doctest::Approx(9.0));
  CHECK(box.at({0, 0, 0, 0}) == doctest::Approx(4.0));
  CHECK(box.at({0, 0, 2, 2}) == doctest::Approx(4.0));
  CHECK(box.at({0, 0, 0, 1}) == doctest::Approx(6.0));

  auto bad_k = Tensor<double>::full({2, 2, 3, 3}, 1.0);  // expects 2 input channels
  CHECK_THROWS_WITH_AS(conv2d(x, bad_k, Tensor<double>::zeros({2}), 1, 1),
                       doctest::Contains("[1x3x4x4]"), std::invalid_argument);
}

TEST_CASE("max pooling: values, ties, brute force, guards") {
  auto y = maxpool2d(Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4})).output;
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 4.0);

  // constant window: the first element in row-major order wins the tie
  ParamStore<double> ps;
  auto c = ps.add("c", Tensor<double>::full({1, 1, 2, 2}, 5.0));
  backward(sum_all(maxpool2d(c).output));
  CHECK(c.grad()[0] == 1.0);
  CHECK(c.grad()[1] == 0.0);
  CHECK(c.grad()[2] == 0.0);
  CHECK(c.grad()[3] == 0.0);

  Rng rng(13);
  auto x = rnd(rng, {2, 3, 8, 8});
  auto pooled = maxpool2d(x).output;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          double best = -1e300;
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj)
              best = std::max(best, x.at({n, ch, 2 * i + di, 2 * j + dj}));
          CHECK(pooled.at({n, ch, i, j}) == best);
        }

  CHECK_THROWS_AS(maxpool2d(Tensor<double>::zeros({1, 1, 3, 4})), std::invalid_argument);
  CHECK_THROWS_AS(maxpool2d(Tensor<double>::zeros({2, 3, 4})), std::invalid_argument);
}

TEST_CASE("bilinear upsampling doubles extents and preserves constants") {
  auto u = upsample_bilinear2x(Tensor<double>::full({1, 2, 3, 4}, 1.75));
  REQUIRE(u.shape() == Shape{1, 2, 6, 8});
  for (double v : u.values()) CHECK(v == doctest::Approx(1.75));

  auto one = upsample_bilinear2x(Tensor<double>::from({1, 1, 1, 1}, {-3.25}));
  REQUIRE(one.shape() == Shape{1, 1, 2, 2});
  for (double v : one.values()) CHECK(v == doctest::Approx(-3.25));

  CHECK_THROWS_AS(upsample_bilinear2x(Tensor<double>::zeros({2, 3, 4})), std::invalid_argument);
}

TEST_CASE("batch normalization statistics") {
  Rng rng(17);
  auto x = rnd(rng, {4, 3, 5, 5});
  auto scale_p = Tensor<double>::full({3}, 1.0);
  auto shift_p = Tensor<double>::zeros({3});
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);

  auto y = batchnorm2d(x, scale_p, shift_p, rm, rv, Mode::Train);
  const std::size_t plane = 25, m = 4 * plane;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < plane; ++i) mean += y.values()[(n * 3 + c) * plane + i];
    mean /= m;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = y.values()[(n * 3 + c) * plane + i] - mean;
        var += d * d;
      }
    var /= m;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps in the denominator shrinks it slightly
  }

  // eval with fresh running stats (mean 0, var 1) is the identity up to eps
  auto rm2 = Tensor<double>::zeros({3});
  auto rv2 = Tensor<double>::full({3}, 1.0);
  auto id = batchnorm2d(x, scale_p, shift_p, rm2, rv2, Mode::Eval);
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(id.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-4));

  CHECK_THROWS_AS(batchnorm2d(x, Tensor<double>::zeros({2}), shift_p, rm, rv, Mode::Train),
                  std::invalid_argument);
}

TEST_CASE("linear layer edge weights") {
  auto x = Tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6});  // {N, F_in}
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto y = linear(x, eye, Tensor<double>::zeros({2}));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);

  auto z = linear(x, Tensor<double>::zeros({4, 2}), Tensor<double>::from({4}, {1, 2, 3, 4}));
  REQUIRE(z.shape() == Shape{3, 4});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t f = 0; f < 4; ++f) CHECK(z.at({n, f}) == doctest::Approx(f + 1.0));

  CHECK_THROWS_WITH_AS(linear(x, Tensor<double>::zeros({4, 3}), Tensor<double>::zeros({4})),
                       doctest::Contains("[3x2]"), std::invalid_argument);
}

TEST_CASE("elementwise activations") {
  auto s = sigmoid(Tensor<double>::zeros({1}));
  CHECK(s.item() == doctest::Approx(0.5));
  CHECK(relu(Tensor<double>::from({2}, {-3.0, 3.0})).values()[0] == 0.0);
  CHECK(relu(Tensor<double>::from({2}, {-3.0, 3.0})).values()[1] == 3.0);

  Rng rng(19);
  auto x = rnd(rng, {2, 3});
  auto m = mul(x, Tensor<double>::full({2, 3}, 1.0));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(m.values()[i] == x.values()[i]);
}

TEST_CASE("dropout modes and mask statistics") {
  Rng rng(23);
  auto x = rnd(rng, {4, 4});

  Rng r0(1);
  auto same = dropout(x, 0.0, Mode::Train, r0);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.values()[i] == x.values()[i]);

  auto ev = dropout(x, 0.5, Mode::Eval, r0);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(ev.values()[i] == x.values()[i]);

  CHECK_THROWS_AS(dropout(x, 1.0, Mode::Train, r0), std::invalid_argument);
  CHECK_THROWS_AS(dropout(x, -0.1, Mode::Train, r0), std::invalid_argument);

  Rng r1(7);
  auto big = Tensor<double>::full({1000000}, 1.0);
  auto d = dropout(big, 0.1, Mode::Train, r1);
  std::size_t zeros = 0;
  for (double v : d.values())
    if (v == 0.0) ++zeros;
  const double frac = static_cast<double>(zeros) / 1e6;
  CHECK(frac == doctest::Approx(0.1).epsilon(0.1));
  CHECK(std::abs(frac - 0.1) < 0.01);
}

TEST_CASE("finite differences agree with backward on a small model") {
  Rng rng(29);
  ParamStore<double> ps;
  auto w1 = ps.add("w1", rnd(rng, {5, 3}));
  auto b1 = ps.add("b1", rnd(rng, {5}));
  auto w2 = ps.add("w2", rnd(rng, {2, 5}));
  auto b2 = ps.add("b2", rnd(rng, {2}));
  auto x = rnd(rng, {4, 3});
  auto fn = [&] { return sum_all(sigmoid(linear(relu(linear(x, w1, b1)), w2, b2))); };

  auto res = grad_check<double>(fn, ps);
  CHECK(res.ok());
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("a corrupted gradient is caught") {
  ParamStore<double> ps;
  auto w = ps.add("w", Tensor<double>::from({4}, {0.4, -0.7, 1.2, 0.3}));
  // forward is the identity but backward inflates the gradient by 1%
  auto fn = [&] {
    auto lie = Tensor<double>::from_op(w.shape(), vec(w), {w}, [w](Tensor<double> y) mutable {
      auto* g = w.grad_mut().data();
      for (std::size_t i = 0; i < w.numel(); ++i) g[i] += 1.01 * y.grad()[i];
    });
    return sum_all(lie);
  };

  auto res = grad_check<double>(fn, ps);
  CHECK_FALSE(res.ok());
  CHECK(res.max_rel_err > 1e-3);
}

}  // TEST_SUITE
