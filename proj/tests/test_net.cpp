#include <cmath>

#include "doctest.h"
#include "ffce/gradcheck.hpp"
#include "ffce/losses.hpp"
#include "ffce/net.hpp"

using namespace ffce;

namespace {

Tensor<double> rnd(Rng& rng, Shape s) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.normal();
  return Tensor<double>::from(std::move(s), std::move(v));
}

void fill(Tensor<double>& t, double v) {
  for (auto& x : t.values_mut()) x = v;
}

NetworkConfig toy_config() {
  NetworkConfig cfg;
  cfg.classes = 3;
  cfg.channels = 8;
  cfg.codewords = 4;
  cfg.se_reduction = 2;
  cfg.slab = 2;
  cfg.dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_SUITE("net") {

TEST_CASE("dense block maps any input width to its configured channels") {
  Rng rng(31);
  FwdCtx<double> ctx;  // eval
  for (std::size_t in_ch : {1UL, 3UL, 7UL}) {
    ParamStore<double> ps;
    auto block = layers::DenseBlock<double>::create(ps, "b", in_ch, 4, 2, 0.0, rng);
    auto y = block.forward(rnd(rng, {2, in_ch, 6, 6}), ctx);
    CHECK(y.shape() == Shape{2, 4, 6, 6});
  }
}

TEST_CASE("dense block eval forward is deterministic") {
  Rng rng(37);
  ParamStore<double> ps;
  auto block = layers::DenseBlock<double>::create(ps, "b", 3, 4, 2, 0.5, rng);
  auto x = rnd(rng, {2, 3, 6, 6});
  FwdCtx<double> ctx;
  auto a = block.forward(x, ctx);
  auto b = block.forward(x, ctx);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("channel/spatial recalibration: saturated gates and contraction") {
  Rng rng(41);
  ParamStore<double> ps;
  auto scse = layers::ScSE<double>::create(ps, "g", 4, 2, rng);
  auto x = rnd(rng, {2, 4, 3, 3});

  SUBCASE("gates forced to 1 pass the input through") {
    fill(scse.squeeze.weight, 0.0);
    fill(scse.excite.weight, 0.0);
    fill(scse.excite.bias, 30.0);   // channel gate -> sigmoid(30)
    fill(scse.spatial.kernel, 0.0);
    fill(scse.spatial.bias, 30.0);  // spatial gate -> sigmoid(30)
    auto y = scse(x);
    for (std::size_t i = 0; i < x.numel(); ++i)
      CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));
  }

  SUBCASE("gating never grows a value") {
    auto y = scse(x);
    for (std::size_t i = 0; i < x.numel(); ++i)
      CHECK(std::abs(y.values()[i]) <= std::abs(x.values()[i]) + 1e-12);
  }
}

TEST_CASE("codeword aggregation with one zero codeword sums the pixels") {
  Rng rng(43);
  ParamStore<double> ps;
  auto enc = EncodingLayer<double>::create(ps, "e", 1, 2, rng);
  fill(enc.dictionary, 0.0);

  auto x = Tensor<double>::from({1, 2, 2, 2}, {0.5, 1.0, -2.0, 3.0,   // channel 0
                                               -1.0, -0.5, -0.25, 0.5});  // channel 1
  auto e = enc(x);
  REQUIRE(e.shape() == Shape{1, 2});
  CHECK(e.values()[0] == doctest::Approx(2.5).epsilon(1e-12));   // relu(0.5+1-2+3)
  CHECK(e.values()[1] == doctest::Approx(0.0).epsilon(1e-12));   // relu(-1.25)
}

TEST_CASE("codeword aggregation vanishes when pixels sit on the codeword") {
  Rng rng(47);
  ParamStore<double> ps;
  auto enc = EncodingLayer<double>::create(ps, "e", 1, 3, rng);
  const auto d = enc.dictionary.values();
  std::vector<double> v(3 * 4);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 4; ++p) v[c * 4 + p] = d[c];
  auto e = enc(Tensor<double>::from({1, 3, 2, 2}, std::move(v)));
  for (double x : e.values()) CHECK(x == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("codeword aggregation is invariant to pixel order") {
  for (std::uint64_t seed = 50; seed < 70; ++seed) {
    Rng rng(seed);
    ParamStore<double> ps;
    auto enc = EncodingLayer<double>::create(ps, "e", 3, 3, rng);
    auto x = rnd(rng, {1, 3, 2, 2});

    std::vector<std::size_t> perm{0, 1, 2, 3};
    for (std::size_t i = 0; i < 4; ++i) std::swap(perm[i], perm[i + rng.index(4 - i)]);
    std::vector<double> pv(x.numel());
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 4; ++p) pv[c * 4 + p] = x.values()[c * 4 + perm[p]];

    auto a = enc(x);
    auto b = enc(Tensor<double>::from({1, 3, 2, 2}, std::move(pv)));
    for (std::size_t i = 0; i < a.numel(); ++i)
      CHECK(std::abs(a.values()[i] - b.values()[i]) < 1e-10);
  }
}

TEST_CASE("context gates come from a sigmoid over the summary vector") {
  Rng rng(53);
  ParamStore<double> ps;
  auto ctx_layer = layers::LinearLayer<double>::create(ps, "c", 3, 4, rng);
  auto e = rnd(rng, {2, 4});

  fill(ctx_layer.weight, 0.0);
  fill(ctx_layer.bias, 0.0);
  auto g0 = sigmoid(ctx_layer(e));
  for (double v : g0.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));

  fill(ctx_layer.bias, 30.0);
  auto g1 = sigmoid(ctx_layer(e));
  for (double v : g1.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng2(59);
  ParamStore<double> ps2;
  auto rnd_layer = layers::LinearLayer<double>::create(ps2, "c", 3, 4, rng2);
  auto gr = sigmoid(rnd_layer(rnd(rng2, {2, 4})));
  for (double v : gr.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("full forward: output contract at 32x32") {
  NetworkConfig cfg;
  cfg.classes = 5;
  cfg.channels = 4;
  cfg.codewords = 3;
  cfg.se_reduction = 2;
  cfg.slab = 4;
  cfg.dropout = 0.0;
  auto net = FfceNet<double>::build(cfg, 61);

  Rng rng(62);
  auto planar = rnd(rng, {1, 1, 32, 32});
  auto slab = rnd(rng, {1, 4, 32, 32});
  FwdCtx<double> ctx;
  auto out = net.forward(planar, slab, ctx);

  CHECK(out.gated.shape() == Shape{1, 5, 32, 32});
  CHECK(out.probs.shape() == Shape{1, 5, 32, 32});
  CHECK(out.gamma.shape() == Shape{1, 5});
  CHECK(out.gamma_logits.shape() == Shape{1, 5});
  CHECK(out.embedding.shape() == Shape{1, 4});
  for (std::size_t p = 0; p < 32 * 32; ++p) {
    double s = 0;
    for (std::size_t l = 0; l < 5; ++l) s += out.probs.values()[l * 32 * 32 + p];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }

  auto again = net.forward(planar, slab, ctx);
  for (std::size_t i = 0; i < out.gated.numel(); ++i)
    CHECK(again.gated.values()[i] == out.gated.values()[i]);
}

TEST_CASE("gate overrides: all-ones equals ungated, a zero gate silences its class") {
  auto net = FfceNet<double>::build(toy_config(), 67);
  Rng rng(68);
  auto planar = rnd(rng, {2, 1, 16, 16});
  auto slab = rnd(rng, {2, 2, 16, 16});

  FwdCtx<double> bypass;
  bypass.bypass_gamma = true;
  auto raw = net.forward(planar, slab, bypass);

  FwdCtx<double> ones;
  ones.gamma_override = Tensor<double>::full({2, 3}, 1.0);
  auto gated = net.forward(planar, slab, ones);
  for (std::size_t i = 0; i < raw.gated.numel(); ++i)
    CHECK(gated.gated.values()[i] == raw.gated.values()[i]);  // bit-exact

  FwdCtx<double> silence;
  silence.gamma_override = Tensor<double>::from({2, 3}, {1, 0, 1, 1, 0, 1});
  auto z = net.forward(planar, slab, silence);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 16 * 16; ++p)
      CHECK(z.gated.values()[(n * 3 + 1) * 256 + p] == 0.0);

  FwdCtx<double> bad;
  bad.gamma_override = Tensor<double>::full({2, 2}, 1.0);
  CHECK_THROWS_AS(net.forward(planar, slab, bad), std::invalid_argument);
}

TEST_CASE("spatial extents must divide by the pooling ladder") {
  auto net = FfceNet<double>::build(toy_config(), 71);
  Rng rng(72);
  FwdCtx<double> ctx;
  CHECK_THROWS_WITH_AS(net.forward(rnd(rng, {1, 1, 24, 32}), rnd(rng, {1, 2, 24, 32}), ctx),
                       doctest::Contains("24"), std::invalid_argument);
  CHECK_THROWS_AS(net.forward(rnd(rng, {1, 2, 16, 16}), rnd(rng, {1, 2, 16, 16}), ctx),
                  std::invalid_argument);  // planar must be single-channel
  CHECK_THROWS_AS(net.forward(rnd(rng, {1, 1, 16, 16}), rnd(rng, {1, 3, 16, 16}), ctx),
                  std::invalid_argument);  // slab channel mismatch
}

TEST_CASE("configuration guards") {
  NetworkConfig cfg = toy_config();
  cfg.classes = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = toy_config();
  cfg.channels = 6;
  cfg.se_reduction = 4;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = toy_config();
  cfg.codewords = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = toy_config();
  cfg.slab = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = toy_config();
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("end-to-end gradient through the composite objective" * doctest::timeout(120)) {
  const std::uint64_t seed = 100;
  Rng rng(seed);
  auto net = FfceNet<double>::build(toy_config(), seed);
  const std::size_t N = 2, H = 16, W = 16, L = 3;

  auto planar = net.params().add("test.planar", rnd(rng, {N, 1, H, W}));
  auto slab = net.params().add("test.slab", rnd(rng, {N, 2, H, W}));
  std::vector<std::int32_t> lab(N * H * W);
  for (auto& g : lab) g = static_cast<std::int32_t>(rng.index(L));
  ITensor labels({N, H, W}, lab);
  std::vector<std::int32_t> pres(N * L, 0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < H * W; ++p) pres[n * L + lab[n * H * W + p]] = 1;
  ITensor presence({N, L}, pres);

  auto fn = [&]() -> Tensor<double> {
    FwdCtx<double> ctx;
    ctx.mode = Mode::Train;
    auto out = net.forward(planar, slab, ctx);
    return composite_loss(out.probs, out.gamma_logits, labels, presence,
                          ClassWeights::uniform(L), LossWeights{})
        .total;
  };

  auto res = grad_check<double>(fn, net.params(), 1e-5, 1e-4, 1e-7, 2, seed);
  CHECK(res.ok());
  CHECK(res.max_rel_err < 1e-4);
}

}  // TEST_SUITE
