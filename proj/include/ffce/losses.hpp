#pragma once

// Training losses: per-pixel weighted cross-entropy on the class
// distribution, a soft multi-class overlap loss with squared-sum
// denominators, and a presence loss on the gate logits. Each is a dedicated
// op with a hand-written backward; the composite just weights and sums them.

#include "ffce/ops.hpp"

namespace ffce {

inline constexpr double kCeLogClamp = 1e-12;
inline constexpr double kDiceEps = 1e-7;

struct ClassWeights {
  std::vector<double> omega;  // one positive weight per class

  static ClassWeights uniform(std::size_t classes) {
    return {std::vector<double>(classes, 1.0)};
  }
};

struct LossWeights {
  double lambda_ce = 1.0;
  double lambda_dice = 1.0;
  double lambda_sec = 0.1;
};

struct LossReport {
  double total = 0, ce = 0, dice = 0, sec = 0;
};

// labels -> exact {0,1} class planes; {H,W} -> {L,H,W}, {N,H,W} -> {N,L,H,W}
template <std::floating_point T>
Tensor<T> make_onehot(const ITensor& labels, std::size_t classes) {
  const std::size_t pix = labels.numel();
  Shape out_shape;
  std::size_t batch = 1;
  if (labels.shape.size() == 2) {
    out_shape = {classes, labels.shape[0], labels.shape[1]};
  } else if (labels.shape.size() == 3) {
    batch = labels.shape[0];
    out_shape = {batch, classes, labels.shape[1], labels.shape[2]};
  } else {
    throw std::invalid_argument("make_onehot: labels must be rank 2 or 3, got " +
                                shape_str(labels.shape));
  }
  const std::size_t plane = pix / batch;
  std::vector<T> v(pix * classes, T(0));
  for (std::size_t i = 0; i < pix; ++i) {
    const std::int32_t g = labels.v[i];
    if (g < 0 || static_cast<std::size_t>(g) >= classes)
      throw std::invalid_argument("make_onehot: label " + std::to_string(g) + " outside [0," +
                                  std::to_string(classes) + ")");
    const std::size_t n = i / plane, p = i % plane;
    v[(n * classes + static_cast<std::size_t>(g)) * plane + p] = T(1);
  }
  return Tensor<T>::from(std::move(out_shape), std::move(v));
}

namespace detail {

// probs {N,L,H,W} + labels {N,H,W}; rank-3/rank-2 singles are reshaped by the
// public wrappers before landing here
template <std::floating_point T>
Tensor<T> ce_impl(Tensor<T> probs, ITensor labels, std::vector<T> omega) {
  const std::size_t N = probs.dim(0), L = probs.dim(1);
  const std::size_t plane = probs.dim(2) * probs.dim(3);
  if (labels.numel() != N * plane)
    throw std::invalid_argument("cross_entropy: labels " + shape_str(labels.shape) +
                                " do not cover probs " + shape_str(probs.shape()));
  if (omega.size() != L)
    throw std::invalid_argument("cross_entropy: " + std::to_string(omega.size()) +
                                " class weights for " + std::to_string(L) + " classes");
  for (std::int32_t g : labels.v)
    if (g < 0 || static_cast<std::size_t>(g) >= L)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(g) + " outside [0," +
                                  std::to_string(L) + ")");
  const T norm = T(1) / static_cast<T>(N * plane);
  const T* pv = probs.values().data();
  double acc = 0;
  for (std::size_t i = 0; i < N * plane; ++i) {
    const std::size_t n = i / plane, p = i % plane;
    const std::size_t g = static_cast<std::size_t>(labels.v[i]);
    const double pt = std::max(static_cast<double>(pv[(n * L + g) * plane + p]), kCeLogClamp);
    acc -= static_cast<double>(omega[g]) * std::log(pt);
  }
  return Tensor<T>::from_op(
      {1}, {static_cast<T>(acc * norm)}, {probs},
      [probs, labels = std::move(labels), omega = std::move(omega), N, L, plane,
       norm](Tensor<T> y) mutable {
        const T g0 = y.grad()[0];
        const T* pv = probs.values().data();
        T* gp = probs.grad_mut().data();
        for (std::size_t i = 0; i < N * plane; ++i) {
          const std::size_t n = i / plane, p = i % plane;
          const std::size_t g = static_cast<std::size_t>(labels.v[i]);
          const std::size_t at = (n * L + g) * plane + p;
          // clamped pixels contribute a constant, so no gradient there
          if (static_cast<double>(pv[at]) >= kCeLogClamp)
            gp[at] -= g0 * norm * omega[g] / pv[at];
        }
      });
}

template <std::floating_point T>
Tensor<T> dice_impl(Tensor<T> probs, Tensor<T> onehot) {
  if (probs.shape() != onehot.shape())
    throw std::invalid_argument("dice: probs " + shape_str(probs.shape()) + " vs one-hot " +
                                shape_str(onehot.shape()));
  const std::size_t N = probs.dim(0), L = probs.dim(1);
  const std::size_t plane = probs.dim(2) * probs.dim(3);
  const T* gv = onehot.values().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      T s = 0;
      for (std::size_t l = 0; l < L; ++l) {
        const T v = gv[(n * L + l) * plane + p];
        if (v != T(0) && v != T(1))
          throw std::invalid_argument("dice: ground truth is not one-hot (entry " +
                                      std::to_string(static_cast<double>(v)) + ")");
        s += v;
      }
      if (s != T(1)) throw std::invalid_argument("dice: ground truth is not one-hot (pixel sum != 1)");
    }

  const T* pv = probs.values().data();
  // per (n,l): intersection, squared prediction mass, squared truth mass
  auto inter = std::make_shared<std::vector<double>>(N * L, 0.0);
  auto pmass = std::make_shared<std::vector<double>>(N * L, 0.0);
  auto gmass = std::make_shared<std::vector<double>>(N * L, 0.0);
  double acc = 0;
  for (std::size_t nl = 0; nl < N * L; ++nl) {
    const T* pp = pv + nl * plane;
    const T* gp = gv + nl * plane;
    double I = 0, P = 0, G = 0;
    for (std::size_t p = 0; p < plane; ++p) {
      I += static_cast<double>(pp[p]) * static_cast<double>(gp[p]);
      P += static_cast<double>(pp[p]) * static_cast<double>(pp[p]);
      G += static_cast<double>(gp[p]) * static_cast<double>(gp[p]);
    }
    (*inter)[nl] = I;
    (*pmass)[nl] = P;
    (*gmass)[nl] = G;
    // no mass on either side counts as perfect agreement on absence
    acc += (P + G == 0.0) ? 1.0 : 2.0 * I / (P + G + kDiceEps);
  }
  const double loss = -acc / static_cast<double>(N * L);
  return Tensor<T>::from_op(
      {1}, {static_cast<T>(loss)}, {probs, onehot},
      [probs, onehot, inter, pmass, gmass, N, L, plane](Tensor<T> y) mutable {
        if (!probs.track()) return;
        const T g0 = y.grad()[0];
        const T* pv = probs.values().data();
        const T* gv = onehot.values().data();
        T* gp = probs.grad_mut().data();
        const double norm = 1.0 / static_cast<double>(N * L);
        for (std::size_t nl = 0; nl < N * L; ++nl) {
          const double denom = (*pmass)[nl] + (*gmass)[nl];
          if (denom == 0.0) continue;
          const double den = denom + kDiceEps;
          const double I = (*inter)[nl];
          const T* pp = pv + nl * plane;
          const T* gg = gv + nl * plane;
          T* out = gp + nl * plane;
          for (std::size_t p = 0; p < plane; ++p) {
            const double dterm = (2.0 * static_cast<double>(gg[p]) * den -
                                  2.0 * I * 2.0 * static_cast<double>(pp[p])) /
                                 (den * den);
            out[p] -= g0 * static_cast<T>(norm * dterm);
          }
        }
      });
}

}  // namespace detail

// -(1/pixels) * sum_x omega[g(x)] * log p_{g(x)}(x), log clamped at 1e-12
template <std::floating_point T>
Tensor<T> weighted_cross_entropy(Tensor<T> probs, const ITensor& labels,
                                 const std::vector<T>& omega) {
  if (probs.rank() == 3) {
    auto p4 = reshape(probs, {1, probs.dim(0), probs.dim(1), probs.dim(2)});
    return detail::ce_impl(p4, labels, omega);
  }
  if (probs.rank() == 4) return detail::ce_impl(probs, labels, omega);
  throw std::invalid_argument("cross_entropy: probs must be rank 3 or 4, got " +
                              shape_str(probs.shape()));
}

// -(1/L) * sum_l 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps), batch-averaged
template <std::floating_point T>
Tensor<T> multiclass_dice_loss(Tensor<T> probs, Tensor<T> gt_onehot) {
  if (probs.rank() == 3) {
    auto p4 = reshape(probs, {1, probs.dim(0), probs.dim(1), probs.dim(2)});
    auto g4 = reshape(gt_onehot, {1, gt_onehot.dim(0), gt_onehot.dim(1), gt_onehot.dim(2)});
    return detail::dice_impl(p4, g4);
  }
  if (probs.rank() == 4) return detail::dice_impl(probs, gt_onehot);
  throw std::invalid_argument("dice: probs must be rank 3 or 4, got " + shape_str(probs.shape()));
}

// mean over classes of softplus(z) - z*y, the stable with-logits form
template <std::floating_point T>
Tensor<T> sec_loss(Tensor<T> sec_logits, const ITensor& presence) {
  Tensor<T> z = sec_logits.rank() == 1 ? reshape(sec_logits, {1, sec_logits.dim(0)}) : sec_logits;
  if (z.rank() != 2)
    throw std::invalid_argument("sec_loss: logits must be rank 1 or 2, got " +
                                shape_str(sec_logits.shape()));
  if (presence.numel() != z.numel())
    throw std::invalid_argument("sec_loss: presence " + shape_str(presence.shape) +
                                " does not match logits " + shape_str(z.shape()));
  for (std::int32_t p : presence.v)
    if (p != 0 && p != 1)
      throw std::invalid_argument("sec_loss: presence entry " + std::to_string(p) +
                                  " outside {0,1}");
  const std::size_t n = z.numel();
  const T* zv = z.values().data();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // softplus(z) - z*y rewritten as softplus((1-2y)*z) for y in {0,1}; this
    // form makes loss(z,y) == loss(-z,1-y) hold bit for bit
    const double v = presence.v[i] ? -static_cast<double>(zv[i]) : static_cast<double>(zv[i]);
    acc += std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  }
  return Tensor<T>::from_op({1}, {static_cast<T>(acc / static_cast<double>(n))}, {z},
                            [z, presence, n](Tensor<T> y) mutable {
                              const T g0 = y.grad()[0];
                              const T* zv = z.values().data();
                              T* gz = z.grad_mut().data();
                              const T norm = T(1) / static_cast<T>(n);
                              for (std::size_t i = 0; i < n; ++i) {
                                const double v = static_cast<double>(zv[i]);
                                const double sig =
                                    v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                           : std::exp(v) / (1.0 + std::exp(v));
                                gz[i] += g0 * norm *
                                         static_cast<T>(sig - static_cast<double>(presence.v[i]));
                              }
                            });
}

template <std::floating_point T>
struct LossBundle {
  Tensor<T> total;  // differentiable
  LossReport report;
};

template <std::floating_point T>
LossBundle<T> composite_loss(Tensor<T> probs, Tensor<T> gamma_logits, const ITensor& labels,
                             const ITensor& presence, const ClassWeights& cw,
                             const LossWeights& lw) {
  const std::size_t L = probs.rank() == 4 ? probs.dim(1) : probs.dim(0);
  if (cw.omega.size() != L)
    throw std::invalid_argument("composite_loss: " + std::to_string(cw.omega.size()) +
                                " class weights for " + std::to_string(L) + " classes");
  std::vector<T> omega(cw.omega.begin(), cw.omega.end());
  auto ce = weighted_cross_entropy(probs, labels, omega);
  auto di = multiclass_dice_loss(probs, make_onehot<T>(labels, L));
  auto se = sec_loss(gamma_logits, presence);
  auto total = add(add(scale(ce, static_cast<T>(lw.lambda_ce)),
                       scale(di, static_cast<T>(lw.lambda_dice))),
                   scale(se, static_cast<T>(lw.lambda_sec)));
  LossBundle<T> out;
  out.total = total;
  out.report = {static_cast<double>(total.item()), static_cast<double>(ce.item()),
                static_cast<double>(di.item()), static_cast<double>(se.item())};
  return out;
}

// median-frequency balancing from per-class voxel counts; classes that never
// occur get the largest present weight so they stay positive
inline ClassWeights weights_from_counts(const std::vector<std::uint64_t>& counts) {
  if (counts.empty()) throw std::invalid_argument("class weights: no counts");
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  if (total == 0) throw std::invalid_argument("class weights: all counts zero");
  std::vector<double> present;
  for (auto c : counts)
    if (c > 0) present.push_back(static_cast<double>(c) / static_cast<double>(total));
  std::sort(present.begin(), present.end());
  const std::size_t h = present.size() / 2;
  const double median =
      present.size() % 2 ? present[h] : 0.5 * (present[h - 1] + present[h]);
  ClassWeights cw;
  cw.omega.resize(counts.size());
  double max_w = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] > 0) {
      cw.omega[c] = median / (static_cast<double>(counts[c]) / static_cast<double>(total));
      max_w = std::max(max_w, cw.omega[c]);
    }
  }
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] == 0) cw.omega[c] = max_w;
  return cw;
}

}  // namespace ffce
