#pragma once

// Segmentation network: a 2D encoder over the target slice plus an optional
// second encoder over the surrounding slice stack, fused at the bottom and
// decoded back to full resolution with skip connections from the 2D path.
// A codeword-attention summary of the bottleneck features drives per-class
// gates that scale the classifier logits before the softmax.

#include <optional>

#include "ffce/ops.hpp"

namespace ffce {

struct NetworkConfig {
  std::size_t classes = 2;       // output channels L
  std::size_t channels = 64;     // working width of every dense block
  std::size_t codewords = 32;    // dictionary size of the encoding head
  std::size_t se_reduction = 2;  // channel squeeze ratio in sc-SE
  std::size_t slab = 10;         // neighbouring slices fed to the second encoder
  double dropout = 0.1;
  bool fuse_spatial = true;  // false keeps only the 2D path

  void validate() const {
    if (classes < 2) throw std::invalid_argument("config: need at least 2 classes");
    if (channels == 0 || channels % se_reduction != 0)
      throw std::invalid_argument("config: channels " + std::to_string(channels) +
                                  " must be a positive multiple of se_reduction " +
                                  std::to_string(se_reduction));
    if (codewords == 0) throw std::invalid_argument("config: codewords must be positive");
    if (slab == 0) throw std::invalid_argument("config: slab must be at least 1");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("config: dropout " + std::to_string(dropout) + " outside [0,1)");
  }

  bool operator==(const NetworkConfig&) const = default;
};

template <std::floating_point T>
struct FwdCtx {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;  // required when mode is Train and dropout > 0
  bool bypass_gamma = false;  // leave classifier logits ungated
  std::optional<Tensor<T>> gamma_override;  // {N, classes}; replaces the learned gates
};

template <std::floating_point T>
struct FwdResult {
  Tensor<T> gated;         // {N, L, H, W} gated classifier logits
  Tensor<T> probs;         // softmax over classes of gated
  Tensor<T> gamma_logits;  // {N, L} pre-sigmoid gate activations
  Tensor<T> gamma;         // {N, L} gates actually applied
  Tensor<T> embedding;     // {N, channels} bottleneck summary vector
};

namespace layers {

template <std::floating_point T>
std::vector<T> kaiming_normal(Rng& rng, std::size_t n, std::size_t fan_in) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(sd * rng.normal());
  return v;
}

template <std::floating_point T>
struct Conv2dLayer {
  Tensor<T> kernel, bias;
  std::size_t pad = 0;

  static Conv2dLayer create(ParamStore<T>& ps, const std::string& prefix, std::size_t out_ch,
                            std::size_t in_ch, std::size_t ksize, Rng& rng) {
    Conv2dLayer l;
    l.pad = ksize / 2;
    l.kernel = ps.add(prefix + ".kernel",
                      Tensor<T>::from({out_ch, in_ch, ksize, ksize},
                                      kaiming_normal<T>(rng, out_ch * in_ch * ksize * ksize,
                                                        in_ch * ksize * ksize)));
    l.bias = ps.add(prefix + ".bias", Tensor<T>::zeros({out_ch}));
    return l;
  }

  Tensor<T> operator()(Tensor<T> x) const { return conv2d(x, kernel, bias, 1, pad); }
};

template <std::floating_point T>
struct BatchNormLayer {
  Tensor<T> scale, shift, running_mean, running_var;

  static BatchNormLayer create(ParamStore<T>& ps, const std::string& prefix, std::size_t ch) {
    BatchNormLayer l;
    l.scale = ps.add(prefix + ".scale", Tensor<T>::full({ch}, T(1)));
    l.shift = ps.add(prefix + ".shift", Tensor<T>::zeros({ch}));
    l.running_mean = ps.add_state(prefix + ".running_mean", Tensor<T>::zeros({ch}));
    l.running_var = ps.add_state(prefix + ".running_var", Tensor<T>::full({ch}, T(1)));
    return l;
  }

  Tensor<T> operator()(Tensor<T> x, Mode mode) const {
    return batchnorm2d(x, scale, shift, running_mean, running_var, mode);
  }
};

template <std::floating_point T>
struct LinearLayer {
  Tensor<T> weight, bias;

  static LinearLayer create(ParamStore<T>& ps, const std::string& prefix, std::size_t out_f,
                            std::size_t in_f, Rng& rng) {
    LinearLayer l;
    l.weight = ps.add(prefix + ".weight",
                      Tensor<T>::from({out_f, in_f}, kaiming_normal<T>(rng, out_f * in_f, in_f)));
    l.bias = ps.add(prefix + ".bias", Tensor<T>::zeros({out_f}));
    return l;
  }

  Tensor<T> operator()(Tensor<T> x) const { return linear(x, weight, bias); }
};

// Concurrent channel and spatial gating, combined by elementwise max.
template <std::floating_point T>
struct ScSE {
  LinearLayer<T> squeeze, excite;
  Conv2dLayer<T> spatial;

  static ScSE create(ParamStore<T>& ps, const std::string& prefix, std::size_t ch,
                     std::size_t reduction, Rng& rng) {
    ScSE l;
    l.squeeze = LinearLayer<T>::create(ps, prefix + ".squeeze", ch / reduction, ch, rng);
    l.excite = LinearLayer<T>::create(ps, prefix + ".excite", ch, ch / reduction, rng);
    l.spatial = Conv2dLayer<T>::create(ps, prefix + ".spatial", 1, ch, 1, rng);
    return l;
  }

  Tensor<T> operator()(Tensor<T> x) const {
    auto pooled = reduce_mean(x, {2, 3});  // {N, C}
    auto ch_gate = sigmoid(excite(relu(squeeze(pooled))));
    auto cse = mul_channels(x, ch_gate);
    auto sse = mul(x, sigmoid(spatial(x)));  // {N,1,H,W} broadcasts over channels
    return emax(cse, sse);
  }
};

// Two 5x5 convolutions with dense concatenation, compressed back to `out`
// channels by a 1x1, then recalibrated by sc-SE and thinned by dropout.
template <std::floating_point T>
struct DenseBlock {
  BatchNormLayer<T> bn0, bn1, bn2;
  Conv2dLayer<T> conv_a, conv_b, conv_c;
  ScSE<T> scse;
  double dropout_rate = 0.0;

  static DenseBlock create(ParamStore<T>& ps, const std::string& prefix, std::size_t in_ch,
                           std::size_t out_ch, std::size_t reduction, double dropout_rate,
                           Rng& rng) {
    DenseBlock b;
    b.dropout_rate = dropout_rate;
    b.bn0 = BatchNormLayer<T>::create(ps, prefix + ".bn0", in_ch);
    b.conv_a = Conv2dLayer<T>::create(ps, prefix + ".conv_a", out_ch, in_ch, 5, rng);
    b.bn1 = BatchNormLayer<T>::create(ps, prefix + ".bn1", in_ch + out_ch);
    b.conv_b = Conv2dLayer<T>::create(ps, prefix + ".conv_b", out_ch, in_ch + out_ch, 5, rng);
    b.bn2 = BatchNormLayer<T>::create(ps, prefix + ".bn2", in_ch + 2 * out_ch);
    b.conv_c = Conv2dLayer<T>::create(ps, prefix + ".conv_c", out_ch, in_ch + 2 * out_ch, 1, rng);
    b.scse = ScSE<T>::create(ps, prefix + ".scse", out_ch, reduction, rng);
    return b;
  }

  Tensor<T> forward(Tensor<T> x, const FwdCtx<T>& ctx) const {
    auto a = conv_a(relu(bn0(x, ctx.mode)));
    auto x1 = concat_channels(x, a);
    auto b = conv_b(relu(bn1(x1, ctx.mode)));
    auto x2 = concat_channels(x1, b);
    auto out = scse(conv_c(relu(bn2(x2, ctx.mode))));
    if (ctx.mode == Mode::Train && dropout_rate > 0.0) {
      if (!ctx.rng) throw std::logic_error("training forward needs an rng for dropout");
      out = dropout(out, dropout_rate, ctx.mode, *ctx.rng);
    }
    return out;
  }
};

}  // namespace layers

// Attention pooling against a learned dictionary: every bottleneck pixel
// votes for each codeword with softmax(-s_k * ||x_i - d_k||^2), the weighted
// residuals are summed per codeword, averaged, and rectified. The result is
// independent of pixel order.
template <std::floating_point T>
struct EncodingLayer {
  Tensor<T> dictionary;  // {K, C}
  Tensor<T> smoothing;   // {K}, raw; the applied factor is exp(raw) > 0

  static EncodingLayer create(ParamStore<T>& ps, const std::string& prefix, std::size_t codewords,
                              std::size_t ch, Rng& rng) {
    EncodingLayer l;
    const double bound = 1.0 / std::sqrt(static_cast<double>(codewords));
    std::vector<T> d(codewords * ch);
    for (auto& v : d) v = static_cast<T>(rng.uniform(-bound, bound));
    std::vector<T> s(codewords);  // applied factor exp(raw) uniform in (0,1]
    for (auto& v : s) v = static_cast<T>(std::log(1.0 - rng.uniform()));
    l.dictionary = ps.add(prefix + ".dictionary", Tensor<T>::from({codewords, ch}, std::move(d)));
    l.smoothing = ps.add(prefix + ".smoothing", Tensor<T>::from({codewords}, std::move(s)));
    return l;
  }

  Tensor<T> operator()(Tensor<T> f) const {  // {N, C, h, w} -> {N, C}
    const std::size_t N = f.dim(0), C = f.dim(1), P = f.dim(2) * f.dim(3);
    const std::size_t K = dictionary.dim(0);
    auto x = reshape(permute(reshape(f, {N, C, P}), {0, 2, 1}), {N, 1, P, C});
    auto d = reshape(dictionary, {1, K, 1, C});
    auto r = sub(x, d);                                               // {N,K,P,C}
    auto dist = reduce_sum(mul(r, r), {3}, true);                     // {N,K,P,1}
    auto weight = mul(dist, reshape(scale(exp_elem(smoothing), T(-1)), {1, K, 1, 1}));
    auto attn = softmax_axis(weight, 1);
    auto per_code = reduce_sum(mul(r, attn), {2}, true);              // {N,K,1,C}
    return relu(reshape(reduce_mean(per_code, {1}), {N, C}));
  }
};

template <std::floating_point T>
class FfceNet {
 public:
  static constexpr std::size_t kDepth = 4;  // pooling stages; spatial extents need % 16 == 0

  static FfceNet build(NetworkConfig cfg, std::uint64_t seed) {
    cfg.validate();
    FfceNet net;
    net.cfg_ = cfg;
    Rng rng(seed);
    auto& ps = net.params_;
    const std::size_t c = cfg.channels;

    for (std::size_t i = 0; i < kDepth; ++i)
      net.enc2d_.push_back(layers::DenseBlock<T>::create(ps, "enc2d.b" + std::to_string(i),
                                                         i == 0 ? 1 : c, c, cfg.se_reduction,
                                                         cfg.dropout, rng));
    if (cfg.fuse_spatial) {
      for (std::size_t i = 0; i < kDepth; ++i)
        net.enc_sp_.push_back(layers::DenseBlock<T>::create(ps, "encsp.b" + std::to_string(i),
                                                            i == 0 ? cfg.slab : c, c,
                                                            cfg.se_reduction, cfg.dropout, rng));
    }
    const std::size_t bottom_ch = cfg.fuse_spatial ? 2 * c : c;
    net.fuse_scse_ = layers::ScSE<T>::create(ps, "fuse.scse", bottom_ch, cfg.se_reduction, rng);
    net.fuse_conv_ = layers::Conv2dLayer<T>::create(ps, "fuse.conv", c, bottom_ch, 1, rng);
    net.bottleneck_ = layers::DenseBlock<T>::create(ps, "bottleneck", c, c, cfg.se_reduction,
                                                    cfg.dropout, rng);
    net.encoding_ = EncodingLayer<T>::create(ps, "encoding", cfg.codewords, c, rng);
    net.context_ = layers::LinearLayer<T>::create(ps, "context", cfg.classes, c, rng);
    for (std::size_t i = 0; i < kDepth; ++i)
      net.dec_.push_back(layers::DenseBlock<T>::create(ps, "dec.b" + std::to_string(i), 2 * c, c,
                                                       cfg.se_reduction, cfg.dropout, rng));
    net.classifier_ = layers::Conv2dLayer<T>::create(ps, "classifier", cfg.classes, c, 1, rng);
    return net;
  }

  const NetworkConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const EncodingLayer<T>& encoding() const { return encoding_; }

  // planar: {N, 1, H, W} target slices; slab: {N, slab, H, W} surrounding
  // stacks, ignored (may be empty) when the spatial path is disabled.
  FwdResult<T> forward(Tensor<T> planar, Tensor<T> slab, const FwdCtx<T>& ctx) const {
    if (planar.rank() != 4 || planar.dim(1) != 1)
      throw std::invalid_argument("forward: planar input must be {N,1,H,W}, got " +
                                  shape_str(planar.shape()));
    const std::size_t N = planar.dim(0), H = planar.dim(2), W = planar.dim(3);
    for (std::size_t ext : {H, W})
      if (ext % 16 != 0)
        throw std::invalid_argument("forward: spatial extent " + std::to_string(ext) +
                                    " not divisible by 16");
    if (cfg_.fuse_spatial &&
        (slab.rank() != 4 || slab.dim(0) != N || slab.dim(1) != cfg_.slab || slab.dim(2) != H ||
         slab.dim(3) != W))
      throw std::invalid_argument("forward: slab input must be {" + std::to_string(N) + "," +
                                  std::to_string(cfg_.slab) + "," + std::to_string(H) + "," +
                                  std::to_string(W) + "}, got " + shape_str(slab.shape()));

    std::vector<Tensor<T>> skips;
    Tensor<T> x = planar;
    for (const auto& b : enc2d_) {
      x = b.forward(x, ctx);
      skips.push_back(x);
      x = maxpool2d(x).output;
    }
    Tensor<T> bottom = x;
    if (cfg_.fuse_spatial) {
      Tensor<T> y = slab;
      for (const auto& b : enc_sp_) {
        y = b.forward(y, ctx);
        y = maxpool2d(y).output;
      }
      bottom = concat_channels(bottom, y);
    }
    bottom = bottleneck_.forward(fuse_conv_(fuse_scse_(bottom)), ctx);

    FwdResult<T> res;
    res.embedding = encoding_(bottom);
    res.gamma_logits = context_(res.embedding);
    res.gamma = sigmoid(res.gamma_logits);
    if (ctx.gamma_override) {
      if (ctx.gamma_override->shape() != Shape{N, cfg_.classes})
        throw std::invalid_argument("forward: gamma override must be {N,classes}, got " +
                                    shape_str(ctx.gamma_override->shape()));
      res.gamma = *ctx.gamma_override;
    }

    Tensor<T> d = bottom;
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      d = upsample_bilinear2x(d);
      d = concat_channels(d, skips[kDepth - 1 - i]);
      d = dec_[i].forward(d, ctx);
    }
    Tensor<T> logits = classifier_(d);
    res.gated = ctx.bypass_gamma ? logits : mul_channels(logits, res.gamma);
    res.probs = softmax_channels(res.gated);
    return res;
  }

  // Convenience for a single sample: planar {1,H,W}, slab {S,H,W}.
  FwdResult<T> forward_single(Tensor<T> planar, Tensor<T> slab, const FwdCtx<T>& ctx) const {
    if (planar.rank() != 3)
      throw std::invalid_argument("forward_single: expected {1,H,W}, got " +
                                  shape_str(planar.shape()));
    Tensor<T> p4 = reshape(planar, {1, planar.dim(0), planar.dim(1), planar.dim(2)});
    Tensor<T> s4 = cfg_.fuse_spatial
                       ? reshape(slab, {1, slab.dim(0), slab.dim(1), slab.dim(2)})
                       : slab;
    return forward(p4, s4, ctx);
  }

 private:
  NetworkConfig cfg_;
  ParamStore<T> params_;
  std::vector<layers::DenseBlock<T>> enc2d_, enc_sp_, dec_;
  layers::ScSE<T> fuse_scse_;
  layers::Conv2dLayer<T> fuse_conv_, classifier_;
  layers::DenseBlock<T> bottleneck_;
  EncodingLayer<T> encoding_;
  layers::LinearLayer<T> context_;
};

}  // namespace ffce
