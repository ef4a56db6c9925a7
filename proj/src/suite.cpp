#include "ffce/suite.hpp"

#include <chrono>
#include <iomanip>

#include "ffce/losses.hpp"
#include "ffce/net.hpp"

namespace ffce {
namespace {

// Layers are checked against |analytic - numeric| <= atol + rtol*scale; the
// full-network sweep runs looser because hundreds of chained ops amplify
// finite-difference noise. The relative gate stays under 1e-4 throughout.
constexpr double kStep = 1e-5;
constexpr double kLayerRtol = 1e-6, kLayerAtol = 1e-9;
constexpr double kNetRtol = 1e-4, kNetAtol = 1e-7;

using D = double;

Tensor<D> rnd(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<D> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<D>::from(std::move(shape), std::move(v));
}

// Fixed random cotangent: reducing through it makes every output coordinate
// matter, unlike a plain sum whose gradient is constant.
Tensor<D> wsum(Tensor<D> y, Rng& rng) {
  std::vector<D> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  auto wt = Tensor<D>::from(y.shape(), std::move(w));
  return sum_all(mul(std::move(y), std::move(wt)));
}

GradCheckResult check_conv(std::uint64_t seed, std::size_t cap) {
  Rng rng(seed);
  ParamStore<D> ps;
  auto x = ps.add("input", rnd(rng, {2, 3, 6, 6}));
  auto layer = layers::Conv2dLayer<D>::create(ps, "conv", 4, 3, 5, rng);
  Rng wrng(seed + 1);
  auto fn = [&]() {
    Rng r = wrng;
    return wsum(layer(x), r);
  };
  return grad_check<D>(fn, ps, kStep, kLayerRtol, kLayerAtol, cap, seed);
}

GradCheckResult check_pool(std::uint64_t seed, std::size_t cap) {
  Rng rng(seed);
  ParamStore<D> ps;
  auto x = ps.add("input", rnd(rng, {2, 2, 6, 6}));
  Rng wrng(seed + 1);
  auto fn = [&]() {
    Rng r = wrng;
    return wsum(maxpool2d(x).output, r);
  };
  return grad_check<D>(fn, ps, kStep, kLayerRtol, kLayerAtol, cap, seed);
}

GradCheckResult check_upsample(std::uint64_t seed, std::size_t cap) {
  Rng rng(seed);
  ParamStore<D> ps;
  auto x = ps.add("input", rnd(rng, {2, 3, 4, 5}));
  Rng wrng(seed + 1);
  auto fn = [&]() {
    Rng r = wrng;
    return wsum(upsample_bilinear2x(x), r);
  };
  return grad_check<D>(fn, ps, kStep, kLayerRtol, kLayerAtol, cap, seed);
}

GradCheckResult check_batchnorm(std::uint64_t seed, std::size_t cap) {
  Rng rng(seed);
  ParamStore<D> ps;
  auto x = ps.add("input", rnd(rng, {2, 3, 4, 4}));
  auto layer = layers::BatchNormLayer<D>::create(ps, "bn", 3);
  Rng wrng(seed + 1);
  auto fn = [&]() {
    Rng r = wrng;
    return wsum(layer(x, Mode::Train), r);
  };
  return grad_check<D>(fn, ps, kStep, kLayerRtol, kLayerAtol, cap, seed);
}

GradCheckResult check_linear(std::uint64_t seed, std::size_t cap) {
  Rng rng(seed);
  ParamStore<D> ps;
  auto x = ps.add("input", rnd(rng, {3, 4}));
  auto layer = layers::LinearLayer<D>::create(ps, "fc", 5, 4, rng);
  Rng wrng(seed + 1);
  auto fn = [&]() {
    Rng r = wrng;
    return wsum(layer(x), r);
  };
  return grad_check<D>(fn, ps, kStep, kLayerRtol, kLayerAtol, cap, seed);
}

GradCheckResult check_scse(std::uint64_t seed, std::size_t cap) {
  Rng rng(seed);
  ParamStore<D> ps;
  auto x = ps.add("input", rnd(rng, {2, 4, 3, 3}));
  auto layer = layers::ScSE<D>::create(ps, "scse", 4, 2, rng);
  Rng wrng(seed + 1);
  auto fn = [&]() {
    Rng r = wrng;
    return wsum(layer(x), r);
  };
  return grad_check<D>(fn, ps, kStep, kLayerRtol, kLayerAtol, cap, seed);
}

GradCheckResult check_dense_block(std::uint64_t seed, std::size_t cap) {
  Rng rng(seed);
  ParamStore<D> ps;
  auto x = ps.add("input", rnd(rng, {2, 3, 6, 6}));
  auto block = layers::DenseBlock<D>::create(ps, "block", 3, 4, 2, 0.0, rng);
  FwdCtx<D> ctx;
  ctx.mode = Mode::Train;
  Rng wrng(seed + 1);
  auto fn = [&]() {
    Rng r = wrng;
    return wsum(block.forward(x, ctx), r);
  };
  return grad_check<D>(fn, ps, kStep, kLayerRtol, kLayerAtol, cap, seed);
}

GradCheckResult check_encoding(std::uint64_t seed, std::size_t cap) {
  Rng rng(seed);
  ParamStore<D> ps;
  auto x = ps.add("input", rnd(rng, {2, 3, 2, 2}));
  auto layer = EncodingLayer<D>::create(ps, "enc", 3, 3, rng);
  Rng wrng(seed + 1);
  auto fn = [&]() {
    Rng r = wrng;
    return wsum(layer(x), r);
  };
  return grad_check<D>(fn, ps, kStep, kLayerRtol, kLayerAtol, cap, seed);
}

GradCheckResult check_context_gates(std::uint64_t seed, std::size_t cap) {
  Rng rng(seed);
  ParamStore<D> ps;
  auto e = ps.add("input", rnd(rng, {2, 4}));
  auto layer = layers::LinearLayer<D>::create(ps, "gates", 3, 4, rng);
  Rng wrng(seed + 1);
  auto fn = [&]() {
    Rng r = wrng;
    return wsum(sigmoid(layer(e)), r);
  };
  return grad_check<D>(fn, ps, kStep, kLayerRtol, kLayerAtol, cap, seed);
}

GradCheckResult check_full_net(std::uint64_t seed, std::size_t cap) {
  NetworkConfig cfg;
  cfg.classes = 3;
  cfg.channels = 8;
  cfg.codewords = 4;
  cfg.slab = 2;
  cfg.dropout = 0.0;  // a resampled mask would break finite differences
  auto net = FfceNet<D>::build(cfg, seed);

  // batch of two: with one sample the 1x1 bottleneck has zero batch variance
  // and every activation sits on a relu kink
  Rng rng(seed + 1);
  const std::size_t N = 2, H = 16, W = 16, L = cfg.classes;
  auto planar = rnd(rng, {N, 1, H, W});
  auto slab = rnd(rng, {N, cfg.slab, H, W});
  ITensor labels{{N, H, W}, std::vector<std::int32_t>(N * H * W)};
  for (auto& l : labels.v) l = static_cast<std::int32_t>(rng.index(L));
  ITensor presence{{N, L}, std::vector<std::int32_t>(N * L, 0)};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < H * W; ++p)
      presence.v[n * L + static_cast<std::size_t>(labels.v[n * H * W + p])] = 1;

  FwdCtx<D> ctx;
  ctx.mode = Mode::Train;
  const auto omega = ClassWeights::uniform(L);
  auto fn = [&]() {
    auto out = net.forward(planar, slab, ctx);
    return composite_loss(out.probs, out.gamma_logits, labels, presence, omega, LossWeights{})
        .total;
  };
  return grad_check<D>(fn, net.params(), kStep, kNetRtol, kNetAtol, cap, seed);
}

}  // namespace

SuiteSummary run_gradient_suite(const SuiteOptions& opt) {
  using Check = GradCheckResult (*)(std::uint64_t, std::size_t);
  struct Entry {
    const char* name;
    Check fn;
    bool is_net;
  };
  const Entry entries[] = {
      {"conv2d", check_conv, false},
      {"maxpool", check_pool, false},
      {"upsample_bilinear", check_upsample, false},
      {"batchnorm", check_batchnorm, false},
      {"linear", check_linear, false},
      {"scse_gate", check_scse, false},
      {"dense_block", check_dense_block, false},
      {"encoding_aggregate", check_encoding, false},
      {"context_gates", check_context_gates, false},
      {"composite_full_net", check_full_net, true},
  };

  SuiteSummary sum;
  const auto t_all = std::chrono::steady_clock::now();
  for (const auto& entry : entries) {
    SuiteCheck c;
    c.name = entry.name;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < opt.seeds; ++s) {
      auto r = entry.fn(opt.seed_base + s, entry.is_net ? opt.net_coords : opt.layer_coords);
      c.max_rel_err = std::max(c.max_rel_err, r.max_rel_err);
      c.max_abs_err = std::max(c.max_abs_err, r.max_abs_err);
      for (const auto& p : r.per_param) c.coords_checked += p.coords_checked;
      c.coords_failed += r.coords_failed;
      ++c.seeds;
    }
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opt.log) {
      *opt.log << (c.pass() ? "PASS" : "FAIL") << "  " << std::left << std::setw(20) << c.name
               << " seeds=" << c.seeds << " coords=" << c.coords_checked << std::scientific
               << std::setprecision(2) << " max_rel=" << c.max_rel_err
               << " max_abs=" << c.max_abs_err << std::defaultfloat << std::setprecision(3)
               << " t=" << c.seconds << "s\n";
    }
    sum.checks.push_back(std::move(c));
  }
  sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_all).count();
  return sum;
}

}  // namespace ffce
