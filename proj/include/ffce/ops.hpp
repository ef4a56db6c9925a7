#pragma once

// Forward operators and their reverse-mode gradients. Convolutions go through
// im2col + GEMM with the batch folded into the pixel axis. Parallel loops only
// ever write disjoint outputs, so results do not depend on the worker count.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>

#include "ffce/tensor.hpp"

namespace ffce {

enum class Mode { Train, Eval };

namespace detail {

// C[M,N] += A[M,K] * B[K,N], row-major
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  parallel_for(M, [&](std::size_t m) {
    T* crow = C + m * N;
    const T* arow = A + m * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = arow[k];
      const T* brow = B + k * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  });
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  parallel_for(M, [&](std::size_t m) {
    const T* arow = A + m * K;
    T* crow = C + m * N;
    for (std::size_t n = 0; n < N; ++n) {
      const T* brow = B + n * K;
      T acc = 0;
      for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[n] += acc;
    }
  });
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  parallel_for(M, [&](std::size_t m) {
    T* crow = C + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[k * M + m];
      const T* brow = B + k * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  });
}

// Odometer walk over an output shape with per-operand effective strides
// (0 on broadcast dims). f(out_linear, a_offset, b_offset).
template <typename F>
void bcast_iterate(const Shape& out, const std::vector<std::size_t>& astr,
                   const std::vector<std::size_t>& bstr, F&& f) {
  const std::size_t r = out.size();
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t a_off = 0, b_off = 0;
  for (std::size_t o = 0;;) {
    f(o, a_off, b_off);
    if (++o == n) break;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      a_off += astr[d];
      b_off += bstr[d];
      if (idx[d] < out[d]) break;
      a_off -= astr[d] * out[d];
      b_off -= bstr[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct BcastPlan {
  Shape out;
  std::vector<std::size_t> astr, bstr;
  bool same_shape;
};

inline BcastPlan bcast_plan(const Shape& a, const Shape& b, const char* opname) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(opname) + ": rank mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  BcastPlan p;
  p.out.resize(a.size());
  for (std::size_t d = 0; d < a.size(); ++d) {
    if (a[d] == b[d] || a[d] == 1 || b[d] == 1)
      p.out[d] = std::max(a[d], b[d]);
    else
      throw std::invalid_argument(std::string(opname) + ": incompatible shapes " + shape_str(a) +
                                  " vs " + shape_str(b) + " (broadcast needs a singleton)");
  }
  p.astr = row_major_strides(a);
  p.bstr = row_major_strides(b);
  for (std::size_t d = 0; d < a.size(); ++d) {
    if (a[d] == 1 && p.out[d] != 1) p.astr[d] = 0;
    if (b[d] == 1 && p.out[d] != 1) p.bstr[d] = 0;
  }
  p.same_shape = (a == b);
  return p;
}

enum class BinKind { Add, Sub, Mul, Max };

template <std::floating_point T>
Tensor<T> binary_bcast(Tensor<T> a, Tensor<T> b, BinKind kind, const char* opname) {
  BcastPlan plan = bcast_plan(a.shape(), b.shape(), opname);
  std::vector<T> out(shape_numel(plan.out));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  auto apply = [kind](T x, T y) -> T {
    switch (kind) {
      case BinKind::Add: return x + y;
      case BinKind::Sub: return x - y;
      case BinKind::Mul: return x * y;
      case BinKind::Max: return x >= y ? x : y;
    }
    return T(0);
  };
  if (plan.same_shape) {
    const std::size_t n = out.size();
    switch (kind) {
      case BinKind::Add: parallel_for(n, [&](std::size_t i) { out[i] = av[i] + bv[i]; }); break;
      case BinKind::Sub: parallel_for(n, [&](std::size_t i) { out[i] = av[i] - bv[i]; }); break;
      case BinKind::Mul: parallel_for(n, [&](std::size_t i) { out[i] = av[i] * bv[i]; }); break;
      case BinKind::Max:
        parallel_for(n, [&](std::size_t i) { out[i] = av[i] >= bv[i] ? av[i] : bv[i]; });
        break;
    }
  } else {
    bcast_iterate(plan.out, plan.astr, plan.bstr,
                  [&](std::size_t o, std::size_t ao, std::size_t bo) { out[o] = apply(av[ao], bv[bo]); });
  }
  return Tensor<T>::from_op(
      plan.out, std::move(out), {a, b}, [a, b, plan, kind](Tensor<T> y) mutable {
        const T* g = y.grad().data();
        const T* av = a.values().data();
        const T* bv = b.values().data();
        const bool wa = a.track(), wb = b.track();
        T* ga = wa ? a.grad_mut().data() : nullptr;
        T* gb = wb ? b.grad_mut().data() : nullptr;
        bcast_iterate(plan.out, plan.astr, plan.bstr, [&](std::size_t o, std::size_t ao, std::size_t bo) {
          switch (kind) {
            case BinKind::Add:
              if (wa) ga[ao] += g[o];
              if (wb) gb[bo] += g[o];
              break;
            case BinKind::Sub:
              if (wa) ga[ao] += g[o];
              if (wb) gb[bo] -= g[o];
              break;
            case BinKind::Mul:
              if (wa) ga[ao] += g[o] * bv[bo];
              if (wb) gb[bo] += g[o] * av[ao];
              break;
            case BinKind::Max:
              if (av[ao] >= bv[bo]) {
                if (wa) ga[ao] += g[o];
              } else if (wb) {
                gb[bo] += g[o];
              }
              break;
          }
        });
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// pointwise

template <std::floating_point T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  return detail::binary_bcast(a, b, detail::BinKind::Add, "add");
}

template <std::floating_point T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  return detail::binary_bcast(a, b, detail::BinKind::Sub, "sub");
}

template <std::floating_point T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  return detail::binary_bcast(a, b, detail::BinKind::Mul, "mul");
}

// elementwise maximum; ties route the gradient to the first operand
template <std::floating_point T>
Tensor<T> emax(Tensor<T> a, Tensor<T> b) {
  return detail::binary_bcast(a, b, detail::BinKind::Max, "emax");
}

template <std::floating_point T>
Tensor<T> relu(Tensor<T> x) {
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  parallel_for(out.size(), [&](std::size_t i) { out[i] = xv[i] > T(0) ? xv[i] : T(0); });
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [x](Tensor<T> y) mutable {
    const T* g = y.grad().data();
    const T* xv = x.values().data();
    T* gx = x.grad_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (xv[i] > T(0)) gx[i] += g[i];
  });
}

template <std::floating_point T>
Tensor<T> sigmoid(Tensor<T> x) {
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  parallel_for(out.size(), [&](std::size_t i) {
    const T v = xv[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  });
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [x](Tensor<T> y) mutable {
    const T* g = y.grad().data();
    const T* yv = y.values().data();
    T* gx = x.grad_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * yv[i] * (T(1) - yv[i]);
  });
}

template <std::floating_point T>
Tensor<T> exp_elem(Tensor<T> x) {
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [x](Tensor<T> y) mutable {
    const T* g = y.grad().data();
    const T* yv = y.values().data();
    T* gx = x.grad_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * yv[i];
  });
}

template <std::floating_point T>
Tensor<T> scale(Tensor<T> x, T c) {
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [x, c](Tensor<T> y) mutable {
    const T* g = y.grad().data();
    T* gx = x.grad_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += c * g[i];
  });
}

template <std::floating_point T>
Tensor<T> reshape(Tensor<T> x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " has " +
                                std::to_string(x.numel()) + " elements, target " + shape_str(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  return Tensor<T>::from_op(std::move(shape), std::move(out), {x}, [x](Tensor<T> y) mutable {
    const T* g = y.grad().data();
    T* gx = x.grad_mut().data();
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i];
  });
}

// map * per-channel vector: {N,C,H,W}*{N,C} or {C,H,W}*{C}
template <std::floating_point T>
Tensor<T> mul_channels(Tensor<T> map, Tensor<T> vec) {
  if (map.rank() == 4 && vec.rank() == 2)
    return mul(map, reshape(vec, {vec.dim(0), vec.dim(1), 1, 1}));
  if (map.rank() == 3 && vec.rank() == 1) return mul(map, reshape(vec, {vec.dim(0), 1, 1}));
  throw std::invalid_argument("mul_channels: unsupported ranks " + shape_str(map.shape()) + " vs " +
                              shape_str(vec.shape()));
}

// ---------------------------------------------------------------------------
// linear

template <std::floating_point T>
Tensor<T> linear(Tensor<T> x, Tensor<T> weight, Tensor<T> bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(1) ||
      bias.dim(0) != weight.dim(0))
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) + ", weight " +
                                shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  const std::size_t N = x.dim(0), Fi = x.dim(1), Fo = weight.dim(0);
  std::vector<T> out(N * Fo);
  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  const T* bv = bias.values().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Fo; ++o) {
      T acc = bv[o];
      const T* xr = xv + n * Fi;
      const T* wr = wv + o * Fi;
      for (std::size_t i = 0; i < Fi; ++i) acc += xr[i] * wr[i];
      out[n * Fo + o] = acc;
    }
  return Tensor<T>::from_op(
      {N, Fo}, std::move(out), {x, weight, bias},
      [x, weight, bias, N, Fi, Fo](Tensor<T> y) mutable {
        const T* g = y.grad().data();
        const T* xv = x.values().data();
        const T* wv = weight.values().data();
        if (x.track()) {
          T* gx = x.grad_mut().data();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < Fo; ++o) {
              const T gv = g[n * Fo + o];
              const T* wr = wv + o * Fi;
              T* gr = gx + n * Fi;
              for (std::size_t i = 0; i < Fi; ++i) gr[i] += gv * wr[i];
            }
        }
        if (weight.track()) {
          T* gw = weight.grad_mut().data();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < Fo; ++o) {
              const T gv = g[n * Fo + o];
              const T* xr = xv + n * Fi;
              T* wr = gw + o * Fi;
              for (std::size_t i = 0; i < Fi; ++i) wr[i] += gv * xr[i];
            }
        }
        if (bias.track()) {
          T* gb = bias.grad_mut().data();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < Fo; ++o) gb[o] += g[n * Fo + o];
        }
      });
}

// ---------------------------------------------------------------------------
// conv2d

namespace detail {

struct ConvDims {
  std::size_t N, C, H, W, Co, kh, kw, Ho, Wo, stride, pad;
  std::size_t ck() const { return C * kh * kw; }
  std::size_t cols() const { return N * Ho * Wo; }
};

// patches matrix P[(c,u,v), (n,i,j)]; zero outside the padded input
template <typename T>
void im2col(const ConvDims& d, const T* x, T* P) {
  parallel_for(d.ck(), [&](std::size_t rr) {
    const std::size_t c = rr / (d.kh * d.kw);
    const std::size_t u = (rr / d.kw) % d.kh;
    const std::size_t v = rr % d.kw;
    T* prow = P + rr * d.cols();
    for (std::size_t n = 0; n < d.N; ++n) {
      const T* xc = x + (n * d.C + c) * d.H * d.W;
      for (std::size_t i = 0; i < d.Ho; ++i) {
        const long y = static_cast<long>(i * d.stride + u) - static_cast<long>(d.pad);
        T* pr = prow + (n * d.Ho + i) * d.Wo;
        if (y < 0 || y >= static_cast<long>(d.H)) {
          std::fill(pr, pr + d.Wo, T(0));
          continue;
        }
        const T* xr = xc + static_cast<std::size_t>(y) * d.W;
        for (std::size_t j = 0; j < d.Wo; ++j) {
          const long xcol = static_cast<long>(j * d.stride + v) - static_cast<long>(d.pad);
          pr[j] = (xcol < 0 || xcol >= static_cast<long>(d.W)) ? T(0) : xr[xcol];
        }
      }
    }
  });
}

// transpose of im2col: scatter-add patch gradients back onto the input grid
template <typename T>
void col2im_acc(const ConvDims& d, const T* P, T* gx) {
  parallel_for(d.C, [&](std::size_t c) {
    for (std::size_t u = 0; u < d.kh; ++u)
      for (std::size_t v = 0; v < d.kw; ++v) {
        const std::size_t rr = (c * d.kh + u) * d.kw + v;
        const T* prow = P + rr * d.cols();
        for (std::size_t n = 0; n < d.N; ++n) {
          T* xc = gx + (n * d.C + c) * d.H * d.W;
          for (std::size_t i = 0; i < d.Ho; ++i) {
            const long y = static_cast<long>(i * d.stride + u) - static_cast<long>(d.pad);
            if (y < 0 || y >= static_cast<long>(d.H)) continue;
            const T* pr = prow + (n * d.Ho + i) * d.Wo;
            T* xr = xc + static_cast<std::size_t>(y) * d.W;
            for (std::size_t j = 0; j < d.Wo; ++j) {
              const long xcol = static_cast<long>(j * d.stride + v) - static_cast<long>(d.pad);
              if (xcol >= 0 && xcol < static_cast<long>(d.W)) xr[xcol] += pr[j];
            }
          }
        }
      }
  });
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> kernel, Tensor<T> bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw std::invalid_argument("conv2d: input " + shape_str(input.shape()) + " and kernel " +
                                shape_str(kernel.shape()) + " must be rank 4");
  if (input.dim(1) != kernel.dim(1))
    throw std::invalid_argument("conv2d: input channels of " + shape_str(input.shape()) +
                                " do not match kernel " + shape_str(kernel.shape()));
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
    throw std::invalid_argument("conv2d: bias " + shape_str(bias.shape()) + " must have " +
                                std::to_string(kernel.dim(0)) + " entries");
  detail::ConvDims d;
  d.N = input.dim(0), d.C = input.dim(1), d.H = input.dim(2), d.W = input.dim(3);
  d.Co = kernel.dim(0), d.kh = kernel.dim(2), d.kw = kernel.dim(3);
  d.stride = stride, d.pad = padding;
  if (d.H + 2 * d.pad < d.kh || d.W + 2 * d.pad < d.kw)
    throw std::invalid_argument("conv2d: kernel " + shape_str(kernel.shape()) +
                                " larger than padded input " + shape_str(input.shape()));
  d.Ho = (d.H + 2 * d.pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * d.pad - d.kw) / stride + 1;

  std::vector<T> patches(d.ck() * d.cols());
  detail::im2col(d, input.values().data(), patches.data());
  std::vector<T> ymat(d.Co * d.cols(), T(0));
  detail::gemm_nn(d.Co, d.cols(), d.ck(), kernel.values().data(), patches.data(), ymat.data());

  std::vector<T> out(d.N * d.Co * d.Ho * d.Wo);
  const T* bv = bias.values().data();
  const std::size_t plane = d.Ho * d.Wo;
  parallel_for(d.N * d.Co, [&](std::size_t nc) {
    const std::size_t n = nc / d.Co, o = nc % d.Co;
    const T* src = ymat.data() + o * d.cols() + n * plane;
    T* dst = out.data() + (n * d.Co + o) * plane;
    for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bv[o];
  });

  return Tensor<T>::from_op(
      {d.N, d.Co, d.Ho, d.Wo}, std::move(out), {input, kernel, bias},
      [input, kernel, bias, d](Tensor<T> y) mutable {
        const std::size_t plane = d.Ho * d.Wo;
        std::vector<T> gymat(d.Co * d.cols());
        const T* g = y.grad().data();
        parallel_for(d.N * d.Co, [&](std::size_t nc) {
          const std::size_t n = nc / d.Co, o = nc % d.Co;
          const T* src = g + (n * d.Co + o) * plane;
          T* dst = gymat.data() + o * d.cols() + n * plane;
          std::memcpy(dst, src, plane * sizeof(T));
        });
        if (bias.track()) {
          T* gb = bias.grad_mut().data();
          for (std::size_t o = 0; o < d.Co; ++o) {
            T acc = 0;
            const T* row = gymat.data() + o * d.cols();
            for (std::size_t p = 0; p < d.cols(); ++p) acc += row[p];
            gb[o] += acc;
          }
        }
        if (kernel.track()) {
          std::vector<T> patches(d.ck() * d.cols());
          detail::im2col(d, input.values().data(), patches.data());
          detail::gemm_nt(d.Co, d.ck(), d.cols(), gymat.data(), patches.data(),
                          kernel.grad_mut().data());
        }
        if (input.track()) {
          std::vector<T> gpatches(d.ck() * d.cols(), T(0));
          detail::gemm_tn(d.ck(), d.cols(), d.Co, kernel.values().data(), gymat.data(),
                          gpatches.data());
          detail::col2im_acc(d, gpatches.data(), input.grad_mut().data());
        }
      });
}

// ---------------------------------------------------------------------------
// maxpool2d (2x2, stride 2)

template <std::floating_point T>
struct MaxPoolOut {
  Tensor<T> output;
  std::shared_ptr<std::vector<std::size_t>> argmax;  // flat input index per output element
};

template <std::floating_point T>
MaxPoolOut<T> maxpool2d(Tensor<T> input) {
  if (input.rank() != 4)
    throw std::invalid_argument("maxpool2d: expected rank-4 input, got " + shape_str(input.shape()));
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw std::invalid_argument("maxpool2d: odd spatial extent in " + shape_str(input.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<T> out(N * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const T* xv = input.values().data();
  parallel_for(N * C, [&](std::size_t nc) {
    const T* xp = xv + nc * H * W;
    T* op = out.data() + nc * Ho * Wo;
    std::size_t* ap = argmax->data() + nc * Ho * Wo;
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        // first index in row-major window order wins ties
        std::size_t best = (2 * i) * W + 2 * j;
        T bv = xp[best];
        const std::size_t cand[3] = {(2 * i) * W + 2 * j + 1, (2 * i + 1) * W + 2 * j,
                                     (2 * i + 1) * W + 2 * j + 1};
        for (std::size_t k = 0; k < 3; ++k)
          if (xp[cand[k]] > bv) {
            bv = xp[cand[k]];
            best = cand[k];
          }
        op[i * Wo + j] = bv;
        ap[i * Wo + j] = nc * H * W + best;
      }
  });
  Tensor<T> output = Tensor<T>::from_op(
      {N, C, Ho, Wo}, std::move(out), {input}, [input, argmax](Tensor<T> y) mutable {
        const T* g = y.grad().data();
        T* gx = input.grad_mut().data();
        const auto& am = *argmax;
        for (std::size_t o = 0; o < am.size(); ++o) gx[am[o]] += g[o];
      });
  return {output, argmax};
}

// ---------------------------------------------------------------------------
// bilinear x2 upsampling (align_corners = false)

template <std::floating_point T>
Tensor<T> upsample_bilinear2x(Tensor<T> input) {
  if (input.rank() != 4)
    throw std::invalid_argument("upsample: expected rank-4 input, got " + shape_str(input.shape()));
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;

  struct Tap {
    std::size_t i0, i1;
    T w;  // weight of i1
  };
  auto make_taps = [](std::size_t in, std::size_t outn) {
    std::vector<Tap> taps(outn);
    for (std::size_t o = 0; o < outn; ++o) {
      double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      if (src < 0) src = 0;
      std::size_t i0 = static_cast<std::size_t>(src);
      if (i0 > in - 1) i0 = in - 1;
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      taps[o] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
    }
    return taps;
  };
  auto hts = std::make_shared<std::vector<Tap>>(make_taps(H, Ho));
  auto wts = std::make_shared<std::vector<Tap>>(make_taps(W, Wo));

  std::vector<T> out(N * C * Ho * Wo);
  const T* xv = input.values().data();
  parallel_for(N * C, [&](std::size_t nc) {
    const T* xp = xv + nc * H * W;
    T* op = out.data() + nc * Ho * Wo;
    for (std::size_t i = 0; i < Ho; ++i) {
      const auto& th = (*hts)[i];
      for (std::size_t j = 0; j < Wo; ++j) {
        const auto& tw = (*wts)[j];
        const T a = xp[th.i0 * W + tw.i0], b = xp[th.i0 * W + tw.i1];
        const T c = xp[th.i1 * W + tw.i0], dd = xp[th.i1 * W + tw.i1];
        const T top = a + tw.w * (b - a);
        const T bot = c + tw.w * (dd - c);
        op[i * Wo + j] = top + th.w * (bot - top);
      }
    }
  });

  return Tensor<T>::from_op(
      {N, C, Ho, Wo}, std::move(out), {input},
      [input, hts, wts, N, C, H, W, Ho, Wo](Tensor<T> y) mutable {
        const T* g = y.grad().data();
        T* gx = input.grad_mut().data();
        parallel_for(N * C, [&](std::size_t nc) {
          const T* gp = g + nc * Ho * Wo;
          T* xp = gx + nc * H * W;
          for (std::size_t i = 0; i < Ho; ++i) {
            const auto& th = (*hts)[i];
            for (std::size_t j = 0; j < Wo; ++j) {
              const auto& tw = (*wts)[j];
              const T gv = gp[i * Wo + j];
              xp[th.i0 * W + tw.i0] += gv * (T(1) - th.w) * (T(1) - tw.w);
              xp[th.i0 * W + tw.i1] += gv * (T(1) - th.w) * tw.w;
              xp[th.i1 * W + tw.i0] += gv * th.w * (T(1) - tw.w);
              xp[th.i1 * W + tw.i1] += gv * th.w * tw.w;
            }
          }
        });
      });
}

// ---------------------------------------------------------------------------
// batch normalization

// Train mode normalizes with batch statistics and folds them into the running
// buffers (which live outside the graph); eval mode normalizes with the
// running buffers. momentum follows the convention new = (1-m)*old + m*batch.
template <std::floating_point T>
Tensor<T> batchnorm2d(Tensor<T> x, Tensor<T> scale_p, Tensor<T> shift_p,
                      Tensor<T> running_mean, Tensor<T> running_var, Mode mode,
                      T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4) throw std::invalid_argument("batchnorm2d: expected rank-4 input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (scale_p.numel() != C || shift_p.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw std::invalid_argument("batchnorm2d: " + std::to_string(C) + " channels in " +
                                shape_str(x.shape()) + " but stats have " +
                                std::to_string(scale_p.numel()) + " entries");
  const std::size_t m = N * H * W;
  const std::size_t plane = H * W;

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto invstd = std::make_shared<std::vector<T>>(C);
  std::vector<T> mean_c(C), var_c(C);

  const T* xv = x.values().data();
  if (mode == Mode::Train) {
    parallel_for(C, [&](std::size_t c) {
      T sum = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const T mu = sum / static_cast<T>(m);
      T sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      mean_c[c] = mu;
      var_c[c] = sq / static_cast<T>(m);
      (*invstd)[c] = T(1) / std::sqrt(var_c[c] + eps);
    });
    T* rm = running_mean.values_mut().data();
    T* rv = running_var.values_mut().data();
    for (std::size_t c = 0; c < C; ++c) {
      const T unbiased = m > 1 ? var_c[c] * static_cast<T>(m) / static_cast<T>(m - 1) : var_c[c];
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mean_c[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    const T* rm = running_mean.values().data();
    const T* rv = running_var.values().data();
    for (std::size_t c = 0; c < C; ++c) {
      mean_c[c] = rm[c];
      (*invstd)[c] = T(1) / std::sqrt(rv[c] + eps);
    }
  }

  std::vector<T> out(x.numel());
  const T* sv = scale_p.values().data();
  const T* bv = shift_p.values().data();
  parallel_for(N * C, [&](std::size_t nc) {
    const std::size_t c = nc % C;
    const T* p = xv + nc * plane;
    T* xh = xhat->data() + nc * plane;
    T* op = out.data() + nc * plane;
    const T mu = mean_c[c], is = (*invstd)[c], sc = sv[c], sh = bv[c];
    for (std::size_t i = 0; i < plane; ++i) {
      xh[i] = (p[i] - mu) * is;
      op[i] = xh[i] * sc + sh;
    }
  });

  const bool train = (mode == Mode::Train);
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x, scale_p, shift_p},
      [x, scale_p, shift_p, xhat, invstd, N, C, plane, m, train](Tensor<T> y) mutable {
        const T* g = y.grad().data();
        const T* sv = scale_p.values().data();
        std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          const std::size_t c = nc % C;
          const T* gp = g + nc * plane;
          const T* xh = xhat->data() + nc * plane;
          T a = 0, b = 0;
          for (std::size_t i = 0; i < plane; ++i) {
            a += gp[i];
            b += gp[i] * xh[i];
          }
          sum_g[c] += a;
          sum_gx[c] += b;
        }
        if (shift_p.track()) {
          T* gb = shift_p.grad_mut().data();
          for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (scale_p.track()) {
          T* gs = scale_p.grad_mut().data();
          for (std::size_t c = 0; c < C; ++c) gs[c] += sum_gx[c];
        }
        if (x.track()) {
          T* gx = x.grad_mut().data();
          parallel_for(N * C, [&](std::size_t nc) {
            const std::size_t c = nc % C;
            const T* gp = g + nc * plane;
            const T* xh = xhat->data() + nc * plane;
            T* gxp = gx + nc * plane;
            const T k = sv[c] * (*invstd)[c];
            if (train) {
              const T mg = sum_g[c] / static_cast<T>(m);
              const T mgx = sum_gx[c] / static_cast<T>(m);
              for (std::size_t i = 0; i < plane; ++i) gxp[i] += k * (gp[i] - mg - xh[i] * mgx);
            } else {
              for (std::size_t i = 0; i < plane; ++i) gxp[i] += k * gp[i];
            }
          });
        }
      });
}

// ---------------------------------------------------------------------------
// softmax

template <std::floating_point T>
Tensor<T> softmax_axis(Tensor<T> x, std::size_t axis) {
  if (axis >= x.rank()) throw std::invalid_argument("softmax_axis: axis out of range");
  const auto& sh = x.shape();
  const std::size_t A = sh[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= sh[d];
  for (std::size_t d = axis + 1; d < sh.size(); ++d) inner *= sh[d];

  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  parallel_for(outer * inner, [&](std::size_t r) {
    const std::size_t o = r / inner, in = r % inner;
    const std::size_t base = o * A * inner + in;
    T mx = xv[base];
    for (std::size_t k = 1; k < A; ++k) mx = std::max(mx, xv[base + k * inner]);
    T sum = 0;
    for (std::size_t k = 0; k < A; ++k) {
      const T e = std::exp(xv[base + k * inner] - mx);
      out[base + k * inner] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (std::size_t k = 0; k < A; ++k) out[base + k * inner] *= inv;
  });

  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x}, [x, A, outer, inner](Tensor<T> y) mutable {
        const T* g = y.grad().data();
        const T* p = y.values().data();
        T* gx = x.grad_mut().data();
        parallel_for(outer * inner, [&](std::size_t r) {
          const std::size_t o = r / inner, in = r % inner;
          const std::size_t base = o * A * inner + in;
          T dot = 0;
          for (std::size_t k = 0; k < A; ++k) dot += g[base + k * inner] * p[base + k * inner];
          for (std::size_t k = 0; k < A; ++k)
            gx[base + k * inner] += p[base + k * inner] * (g[base + k * inner] - dot);
        });
      });
}

// per-pixel distribution over the class axis: {L,H,W} or {N,L,H,W}
template <std::floating_point T>
Tensor<T> softmax_channels(Tensor<T> x) {
  if (x.rank() == 4) return softmax_axis(x, 1);
  if (x.rank() == 3) return softmax_axis(x, 0);
  throw std::invalid_argument("softmax_channels: expected rank 3 or 4, got " + shape_str(x.shape()));
}

// ---------------------------------------------------------------------------
// concat / slice

template <std::floating_point T>
Tensor<T> concat(Tensor<T> a, Tensor<T> b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank())
    throw std::invalid_argument("concat: rank mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  for (std::size_t d = 0; d < a.rank(); ++d)
    if (d != axis && a.dim(d) != b.dim(d))
      throw std::invalid_argument("concat: shapes " + shape_str(a.shape()) + " and " +
                                  shape_str(b.shape()) + " differ outside axis " +
                                  std::to_string(axis));
  Shape sh = a.shape();
  sh[axis] += b.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= sh[d];
  for (std::size_t d = axis + 1; d < sh.size(); ++d) inner *= sh[d];
  const std::size_t wa = a.dim(axis) * inner, wb = b.dim(axis) * inner;

  std::vector<T> out(shape_numel(sh));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * (wa + wb), av + o * wa, wa * sizeof(T));
    std::memcpy(out.data() + o * (wa + wb) + wa, bv + o * wb, wb * sizeof(T));
  }
  return Tensor<T>::from_op(std::move(sh), std::move(out), {a, b},
                            [a, b, outer, wa, wb](Tensor<T> y) mutable {
                              const T* g = y.grad().data();
                              if (a.track()) {
                                T* ga = a.grad_mut().data();
                                for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t i = 0; i < wa; ++i)
                                    ga[o * wa + i] += g[o * (wa + wb) + i];
                              }
                              if (b.track()) {
                                T* gb = b.grad_mut().data();
                                for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t i = 0; i < wb; ++i)
                                    gb[o * wb + i] += g[o * (wa + wb) + wa + i];
                              }
                            });
}

// channel axis: 1 for batched maps, 0 for {C,H,W}
template <std::floating_point T>
Tensor<T> concat_channels(Tensor<T> a, Tensor<T> b) {
  if (a.rank() == 4) return concat(a, b, 1);
  if (a.rank() == 3) return concat(a, b, 0);
  throw std::invalid_argument("concat_channels: expected rank 3 or 4");
}

template <std::floating_point T>
Tensor<T> slice_axis(Tensor<T> x, std::size_t axis, std::size_t from, std::size_t to) {
  if (axis >= x.rank() || from >= to || to > x.dim(axis))
    throw std::invalid_argument("slice_axis: bad range [" + std::to_string(from) + "," +
                                std::to_string(to) + ") on " + shape_str(x.shape()));
  Shape sh = x.shape();
  sh[axis] = to - from;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t wfull = x.dim(axis) * inner, wout = (to - from) * inner;

  std::vector<T> out(shape_numel(sh));
  const T* xv = x.values().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * wout, xv + o * wfull + from * inner, wout * sizeof(T));
  return Tensor<T>::from_op(std::move(sh), std::move(out), {x},
                            [x, outer, inner, wfull, wout, from](Tensor<T> y) mutable {
                              const T* g = y.grad().data();
                              T* gx = x.grad_mut().data();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < wout; ++i)
                                  gx[o * wfull + from * inner + i] += g[o * wout + i];
                            });
}

// rearrange axes: out dim d has extent x.dim(axes[d])
template <std::floating_point T>
Tensor<T> permute(Tensor<T> x, std::vector<std::size_t> axes) {
  if (axes.size() != x.rank())
    throw std::invalid_argument("permute: " + std::to_string(axes.size()) + " axes for " +
                                shape_str(x.shape()));
  std::vector<bool> seen(x.rank(), false);
  for (std::size_t a : axes) {
    if (a >= x.rank() || seen[a]) throw std::invalid_argument("permute: axes must be a permutation");
    seen[a] = true;
  }
  Shape out_shape(x.rank());
  for (std::size_t d = 0; d < x.rank(); ++d) out_shape[d] = x.dim(axes[d]);
  const auto xstr = row_major_strides(x.shape());
  std::vector<std::size_t> src_str(x.rank());
  for (std::size_t d = 0; d < x.rank(); ++d) src_str[d] = xstr[axes[d]];

  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  std::vector<std::size_t> zero(x.rank(), 0);
  detail::bcast_iterate(out_shape, src_str, zero,
                        [&](std::size_t o, std::size_t xi, std::size_t) { out[o] = xv[xi]; });
  return Tensor<T>::from_op(std::move(out_shape), std::move(out), {x},
                            [x, src_str, zero](Tensor<T> y) mutable {
                              const T* g = y.grad().data();
                              T* gx = x.grad_mut().data();
                              detail::bcast_iterate(y.shape(), src_str, zero,
                                                    [&](std::size_t o, std::size_t xi, std::size_t) {
                                                      gx[xi] += g[o];
                                                    });
                            });
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

template <std::floating_point T>
Tensor<T> reduce_impl(Tensor<T> x, std::vector<std::size_t> axes, bool mean, bool keepdims) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t a : axes)
    if (a >= x.rank()) throw std::invalid_argument("reduce: axis out of range");
  std::vector<bool> reduced(x.rank(), false);
  std::size_t count = 1;
  for (std::size_t a : axes) {
    reduced[a] = true;
    count *= x.dim(a);
  }

  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (!reduced[d])
      out_shape.push_back(x.dim(d));
    else if (keepdims)
      out_shape.push_back(1);
  }
  if (out_shape.empty()) out_shape = {1};

  // output offset per input element: strides over kept dims, 0 over reduced
  Shape kept = x.shape();
  for (std::size_t d = 0; d < x.rank(); ++d)
    if (reduced[d]) kept[d] = 1;
  auto ostr = row_major_strides(kept);
  for (std::size_t d = 0; d < x.rank(); ++d)
    if (reduced[d]) ostr[d] = 0;

  std::vector<T> out(shape_numel(out_shape), T(0));
  const T* xv = x.values().data();
  auto xstr = row_major_strides(x.shape());
  bcast_iterate(x.shape(), xstr, ostr, [&](std::size_t, std::size_t xi, std::size_t oi) { out[oi] += xv[xi]; });
  const T inv = mean ? T(1) / static_cast<T>(count) : T(1);
  if (mean)
    for (auto& v : out) v *= inv;

  auto in_shape = x.shape();
  return Tensor<T>::from_op(std::move(out_shape), std::move(out), {x},
                            [x, in_shape, xstr, ostr, inv](Tensor<T> y) mutable {
                              const T* g = y.grad().data();
                              T* gx = x.grad_mut().data();
                              bcast_iterate(in_shape, xstr, ostr,
                                            [&](std::size_t, std::size_t xi, std::size_t oi) {
                                              gx[xi] += g[oi] * inv;
                                            });
                            });
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> reduce_sum(Tensor<T> x, std::vector<std::size_t> axes, bool keepdims = false) {
  return detail::reduce_impl(x, std::move(axes), false, keepdims);
}

template <std::floating_point T>
Tensor<T> reduce_mean(Tensor<T> x, std::vector<std::size_t> axes, bool keepdims = false) {
  return detail::reduce_impl(x, std::move(axes), true, keepdims);
}

template <std::floating_point T>
Tensor<T> sum_all(Tensor<T> x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce_sum(x, std::move(axes));
}

// ---------------------------------------------------------------------------
// dropout (inverted; eval mode is the identity)

template <std::floating_point T>
Tensor<T> dropout(Tensor<T> x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate " + std::to_string(rate) + " outside [0,1)");
  if (mode == Mode::Eval || rate == 0.0) return x;
  const T keep_inv = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<std::uint8_t>>(x.numel());
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool keep = rng.uniform() >= rate;
    (*mask)[i] = keep;
    out[i] = keep ? xv[i] * keep_inv : T(0);
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x},
                            [x, mask, keep_inv](Tensor<T> y) mutable {
                              const T* g = y.grad().data();
                              T* gx = x.grad_mut().data();
                              for (std::size_t i = 0; i < x.numel(); ++i)
                                if ((*mask)[i]) gx[i] += g[i] * keep_inv;
                            });
}

}  // namespace ffce
