#pragma once

// Central-difference verification of reverse-mode gradients. fn() must rebuild
// the graph from the current parameter values and return a scalar, so nudging
// a parameter and calling it again yields the perturbed objective.
//
// A coordinate passes when |analytic - numeric| <= rtol * max(scale, atol/rtol)
// with scale = max(|analytic|, |numeric|): a relative-error gate whose
// denominator is floored at atol/rtol, so near-zero gradients are judged
// against the absolute tolerance atol instead of a roundoff quotient. The
// reported max_rel_err uses the same floored denominator, making
// "max_rel_err <= rtol" equivalent to "every coordinate passed".
//
// A coordinate that fails at the base step is retried at step/10, then
// step/100: a difference interval straddling a relu kink or a pool-argmax
// flip gives an error that shrinks with the step, while a genuine gradient
// bug persists at every step size.

#include <functional>

#include "ffce/tensor.hpp"

namespace ffce {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;  // denominator floored at atol/rtol
  double max_abs_err = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_failed = 0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> per_param;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t coords_failed = 0;
  bool ok() const { return coords_failed == 0; }
};

namespace detail {

inline bool close(double ana, double numeric, double rtol, double atol) {
  const double scale = std::max(std::abs(ana), std::abs(numeric));
  return std::abs(ana - numeric) <= rtol * std::max(scale, atol / rtol);
}

inline void tally(GradCheckEntry& e, double ana, double numeric, double rtol, double atol) {
  const double abs_err = std::abs(ana - numeric);
  const double scale = std::max(std::abs(ana), std::abs(numeric));
  e.max_abs_err = std::max(e.max_abs_err, abs_err);
  e.max_rel_err = std::max(e.max_rel_err, abs_err / std::max(scale, atol / rtol));
  ++e.coords_checked;
  if (!close(ana, numeric, rtol, atol)) ++e.coords_failed;
}

template <std::floating_point T>
double fd_coord(const std::function<Tensor<T>()>& fn, T* v, std::size_t c, T step) {
  const T orig = v[c];
  v[c] = orig + step;
  const double fp = static_cast<double>(fn().item());
  v[c] = orig - step;
  const double fm = static_cast<double>(fn().item());
  v[c] = orig;
  return (fp - fm) / (2.0 * static_cast<double>(step));
}

}  // namespace detail

// max_coords_per_param == 0 checks every coordinate; otherwise a deterministic
// subsample (seeded by coord_seed) keeps large parameters affordable.
template <std::floating_point T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& fn, ParamStore<T>& params,
                           T step = T(1e-5), double rtol = 1e-6, double atol = 1e-9,
                           std::size_t max_coords_per_param = 0, std::uint64_t coord_seed = 17) {
  params.zero_grad();
  Tensor<T> loss = fn();
  backward(loss);

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.entries().size());
  for (auto& e : params.entries()) {
    if (!e.trainable) {
      analytic.emplace_back();
      continue;
    }
    if (e.value.has_grad()) {
      auto g = e.value.grad();
      analytic.emplace_back(g.begin(), g.end());
    } else {
      analytic.emplace_back(e.value.numel(), T(0));
    }
  }

  Rng rng(coord_seed);
  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.entries().size(); ++pi) {
    auto& e = params.entries()[pi];
    if (!e.trainable) continue;
    const std::size_t n = e.value.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords_per_param > 0 && n > max_coords_per_param) {
      for (std::size_t i = 0; i < max_coords_per_param; ++i)
        std::swap(coords[i], coords[i + rng.index(n - i)]);
      coords.resize(max_coords_per_param);
    }

    GradCheckEntry entry;
    entry.name = e.name;
    T* v = e.value.values_mut().data();
    for (std::size_t c : coords) {
      const double ana = static_cast<double>(analytic[pi][c]);
      double numeric = detail::fd_coord(fn, v, c, step);
      for (T h = step; !detail::close(ana, numeric, rtol, atol) && h > step / T(200);)
        numeric = detail::fd_coord(fn, v, c, h /= T(10));
      detail::tally(entry, ana, numeric, rtol, atol);
    }
    res.max_rel_err = std::max(res.max_rel_err, entry.max_rel_err);
    res.max_abs_err = std::max(res.max_abs_err, entry.max_abs_err);
    res.coords_failed += entry.coords_failed;
    res.per_param.push_back(std::move(entry));
  }
  return res;
}

// Same check for the gradient w.r.t. a standalone input tensor.
template <std::floating_point T>
GradCheckEntry grad_check_input(const std::function<Tensor<T>()>& fn, Tensor<T>& input,
                                T step = T(1e-5), double rtol = 1e-6, double atol = 1e-9) {
  input.zero_grad();
  Tensor<T> loss = fn();
  backward(loss);
  std::vector<T> analytic(input.numel(), T(0));
  if (input.has_grad()) {
    auto g = input.grad();
    analytic.assign(g.begin(), g.end());
  }
  GradCheckEntry entry;
  entry.name = "input";
  T* v = input.values_mut().data();
  for (std::size_t c = 0; c < input.numel(); ++c) {
    const double ana = static_cast<double>(analytic[c]);
    double numeric = detail::fd_coord(fn, v, c, step);
    for (T h = step; !detail::close(ana, numeric, rtol, atol) && h > step / T(200);)
      numeric = detail::fd_coord(fn, v, c, h /= T(10));
    detail::tally(entry, ana, numeric, rtol, atol);
  }
  return entry;
}

}  // namespace ffce
