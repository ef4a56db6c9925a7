#include "ffce/train.hpp"

#include <cstring>
#include <map>
#include <numeric>
#include <span>

#include "ffce/wire.hpp"

namespace ffce {

double poly_lr(double base_lr, std::size_t iter, std::size_t iter_total, double p) {
  if (iter_total == 0) throw std::invalid_argument("poly_lr: iter_total must be positive");
  if (iter > iter_total)
    throw std::invalid_argument("poly_lr: iteration " + std::to_string(iter) +
                                " beyond schedule end " + std::to_string(iter_total));
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(iter_total), p);
}

Trainer::Trainer(NetworkConfig ncfg, TrainConfig tcfg)
    : net_(FfceNet<float>::build(ncfg, tcfg.seed)),
      tcfg_(tcfg),
      // separate stream from the init draws so adding a layer does not shift
      // the shuffle/dropout sequence
      rng_(tcfg.seed ^ 0x9e3779b97f4a7c15ull) {
  tcfg_.validate();
  for (const auto& e : net_.params().entries())
    if (e.trainable) momentum_.emplace_back(e.value.numel(), 0.0f);
}

void Trainer::attach_data(const std::vector<std::pair<Volume, LabelVolume>>& data) {
  if (data.empty()) throw DataError("training: empty dataset");
  const NetworkConfig& ncfg = net_.config();
  samples_.clear();
  for (const auto& [img, lab] : data) {
    if (samples_.empty()) {
      h_ = img.dims[1];
      w_ = img.dims[2];
    } else if (img.dims[1] != h_ || img.dims[2] != w_) {
      throw DataError("training: volume " + img.id + " has plane " + std::to_string(img.dims[1]) +
                      "x" + std::to_string(img.dims[2]) + ", expected " + std::to_string(h_) + "x" +
                      std::to_string(w_));
    }
    for (std::size_t i = 0; i < img.dims[0]; ++i)
      samples_.push_back(extract_slice_sample(img, &lab, i, ncfg.slab, ncfg.classes));
  }
  if (sample_count_ != 0 && sample_count_ != samples_.size())
    throw DataError("training: checkpoint was trained on " + std::to_string(sample_count_) +
                    " samples, this dataset yields " + std::to_string(samples_.size()));
  sample_count_ = samples_.size();
  const std::size_t per_epoch = (sample_count_ + tcfg_.batch_size - 1) / tcfg_.batch_size;
  iter_total_ = tcfg_.epochs * per_epoch;
  if (omega_.omega.empty()) {
    if (tcfg_.class_weights_enabled) {
      std::vector<LabelVolume> labs;
      for (const auto& [img, lab] : data) labs.push_back(lab);
      omega_ = compute_class_weights(labs, ncfg.classes);
    } else {
      omega_ = ClassWeights::uniform(ncfg.classes);
    }
  }
}

std::size_t Trainer::epochs_done() const {
  if (sample_count_ == 0) return 0;
  const std::size_t per_epoch = (sample_count_ + tcfg_.batch_size - 1) / tcfg_.batch_size;
  return iter_ / per_epoch;
}

LossReport Trainer::train_epoch() {
  if (samples_.empty()) throw std::logic_error("train_epoch: no dataset attached");
  if (iter_ >= iter_total_) throw std::logic_error("train_epoch: schedule already finished");
  const std::size_t n = samples_.size();
  const std::size_t L = net_.config().classes;
  const std::size_t S = net_.config().slab;
  const std::size_t plane = h_ * w_;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i + 1 < n; ++i)
    std::swap(order[i], order[i + rng_.index(n - i)]);

  LossReport agg;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += tcfg_.batch_size) {
    const std::size_t B = std::min(tcfg_.batch_size, n - start);
    std::vector<float> planar(B * plane), slab(B * S * plane);
    ITensor labels{{B, h_, w_}, std::vector<std::int32_t>(B * plane)};
    ITensor presence{{B, L}, std::vector<std::int32_t>(B * L)};
    for (std::size_t b = 0; b < B; ++b) {
      const SliceSample& s = samples_[order[start + b]];
      std::memcpy(planar.data() + b * plane, s.slice.data(), plane * sizeof(float));
      std::memcpy(slab.data() + b * S * plane, s.stack.data(), S * plane * sizeof(float));
      std::copy(s.gt.begin(), s.gt.end(), labels.v.begin() + static_cast<std::ptrdiff_t>(b * plane));
      std::copy(s.presence.begin(), s.presence.end(),
                presence.v.begin() + static_cast<std::ptrdiff_t>(b * L));
    }
    auto planar_t = Tensor<float>::from({B, 1, h_, w_}, std::move(planar));
    auto slab_t = Tensor<float>::from({B, S, h_, w_}, std::move(slab));

    FwdCtx<float> ctx;
    ctx.mode = Mode::Train;
    ctx.rng = &rng_;
    auto out = net_.forward(planar_t, slab_t, ctx);
    auto bundle = composite_loss(out.probs, out.gamma_logits, labels, presence, omega_,
                                 tcfg_.loss_weights);
    net_.params().zero_grad();
    backward(bundle.total);
    const double lr = poly_lr(tcfg_.base_lr, iter_, iter_total_, tcfg_.poly_power);
    sgd_step(net_.params(), momentum_, lr, tcfg_.momentum, tcfg_.weight_decay);
    ++iter_;

    agg.total += bundle.report.total;
    agg.ce += bundle.report.ce;
    agg.dice += bundle.report.dice;
    agg.sec += bundle.report.sec;
    ++batches;
  }
  agg.total /= static_cast<double>(batches);
  agg.ce /= static_cast<double>(batches);
  agg.dice /= static_cast<double>(batches);
  agg.sec /= static_cast<double>(batches);
  return agg;
}

// ---------------------------------------------------------------------------
// checkpoint container: "FFCK" header followed by named blobs

namespace {

constexpr char kCkptMagic[4] = {'F', 'F', 'C', 'K'};
constexpr std::uint8_t kCkptVersion = 1;
enum BlobType : std::uint8_t { kF32 = 0, kU16 = 1, kF64 = 2, kU64 = 3, kU8 = 4 };

std::size_t blob_elem_size(std::uint8_t t) {
  switch (t) {
    case kF32: return 4;
    case kU16: return 2;
    case kF64: return 8;
    case kU64: return 8;
    case kU8: return 1;
  }
  throw DataError("checkpoint: unknown blob dtype " + std::to_string(t));
}

struct Blob {
  std::uint8_t dtype = kF32;
  Shape shape;
  std::vector<std::uint8_t> payload;

  std::size_t numel() const { return shape_numel(shape); }
};

void append_blob(std::vector<std::uint8_t>& out, const std::string& name, const Blob& b) {
  wire::put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(b.dtype);
  out.push_back(static_cast<std::uint8_t>(b.shape.size()));
  for (std::size_t d : b.shape) wire::put_u64(out, d);
  out.insert(out.end(), b.payload.begin(), b.payload.end());
}

Blob f32_blob(Shape shape, std::span<const float> v) {
  Blob b;
  b.dtype = kF32;
  b.shape = std::move(shape);
  b.payload.reserve(4 * v.size());
  for (float x : v) wire::put_f32(b.payload, x);
  return b;
}

Blob f64_blob(Shape shape, std::span<const double> v) {
  Blob b;
  b.dtype = kF64;
  b.shape = std::move(shape);
  b.payload.reserve(8 * v.size());
  for (double x : v) wire::put_f64(b.payload, x);
  return b;
}

Blob u64_blob(std::uint64_t v) {
  Blob b;
  b.dtype = kU64;
  b.shape = {1};
  wire::put_u64(b.payload, v);
  return b;
}

std::map<std::string, Blob> parse_checkpoint(const std::filesystem::path& path) {
  const auto bytes = wire::read_file(path);
  const std::string where = path.string() + ": ";
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
    throw DataError(where + "bad checkpoint magic at byte offset 0");
  if (bytes[4] != kCkptVersion)
    throw DataError(where + "unsupported checkpoint version " + std::to_string(bytes[4]));
  if (bytes[5] || bytes[6] || bytes[7])
    throw DataError(where + "nonzero reserved bytes at byte offset 5");

  std::map<std::string, Blob> blobs;
  std::size_t at = 8;
  auto need = [&](std::size_t n) {
    if (at + n > bytes.size())
      throw DataError(where + "truncated blob at byte offset " + std::to_string(at));
  };
  while (at < bytes.size()) {
    need(4);
    const std::uint32_t name_len = wire::get_u32(bytes.data() + at);
    at += 4;
    need(name_len + 2);
    std::string name(reinterpret_cast<const char*>(bytes.data() + at), name_len);
    at += name_len;
    Blob b;
    b.dtype = bytes[at++];
    const std::uint8_t rank = bytes[at++];
    blob_elem_size(b.dtype);  // validates the code
    need(8 * rank);
    for (std::uint8_t d = 0; d < rank; ++d) {
      b.shape.push_back(static_cast<std::size_t>(wire::get_u64(bytes.data() + at)));
      at += 8;
    }
    const std::size_t payload = b.numel() * blob_elem_size(b.dtype);
    need(payload);
    b.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(at),
                     bytes.begin() + static_cast<std::ptrdiff_t>(at + payload));
    at += payload;
    if (!blobs.emplace(std::move(name), std::move(b)).second)
      throw DataError(where + "duplicate blob name");
  }
  return blobs;
}

const Blob& want(const std::map<std::string, Blob>& blobs, const std::string& name,
                 std::uint8_t dtype, const std::filesystem::path& path) {
  auto it = blobs.find(name);
  if (it == blobs.end()) throw DataError(path.string() + ": checkpoint missing blob " + name);
  if (it->second.dtype != dtype)
    throw DataError(path.string() + ": blob " + name + " has dtype " +
                    std::to_string(it->second.dtype) + ", expected " + std::to_string(dtype));
  return it->second;
}

std::vector<double> f64_values(const Blob& b) {
  std::vector<double> v(b.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = wire::get_f64(b.payload.data() + 8 * i);
  return v;
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kCkptMagic, kCkptMagic + 4);
  out.push_back(kCkptVersion);
  out.insert(out.end(), {0, 0, 0});

  const NetworkConfig& nc = net_.config();
  const std::vector<double> ncv = {
      static_cast<double>(nc.classes),     static_cast<double>(nc.channels),
      static_cast<double>(nc.codewords),   static_cast<double>(nc.se_reduction),
      static_cast<double>(nc.slab),        nc.dropout,
      nc.fuse_spatial ? 1.0 : 0.0};
  append_blob(out, "net.config", f64_blob({ncv.size()}, ncv));

  const std::vector<double> tcv = {tcfg_.base_lr,
                                   tcfg_.poly_power,
                                   tcfg_.weight_decay,
                                   tcfg_.momentum,
                                   static_cast<double>(tcfg_.batch_size),
                                   static_cast<double>(tcfg_.epochs),
                                   tcfg_.class_weights_enabled ? 1.0 : 0.0,
                                   tcfg_.loss_weights.lambda_ce,
                                   tcfg_.loss_weights.lambda_dice,
                                   tcfg_.loss_weights.lambda_sec};
  append_blob(out, "train.config", f64_blob({tcv.size()}, tcv));
  append_blob(out, "train.seed", u64_blob(tcfg_.seed));
  append_blob(out, "meta.iter", u64_blob(iter_));
  append_blob(out, "meta.samples", u64_blob(sample_count_));

  {
    const std::string state = rng_.state();
    Blob b;
    b.dtype = kU8;
    b.shape = {state.size()};
    b.payload.assign(state.begin(), state.end());
    append_blob(out, "meta.rng", b);
  }
  if (!omega_.omega.empty())
    append_blob(out, "loss.omega", f64_blob({omega_.omega.size()}, omega_.omega));

  for (const auto& e : net_.params().entries())
    append_blob(out, "param." + e.name, f32_blob(e.value.shape(), e.value.values()));
  std::size_t bi = 0;
  for (const auto& e : net_.params().entries()) {
    if (!e.trainable) continue;
    append_blob(out, "opt." + e.name, f32_blob(e.value.shape(), momentum_[bi]));
    ++bi;
  }
  wire::write_file(path, out);
}

Trainer Trainer::load_checkpoint(const std::filesystem::path& path,
                                 const NetworkConfig* expected) {
  const auto blobs = parse_checkpoint(path);

  const auto ncv = f64_values(want(blobs, "net.config", kF64, path));
  if (ncv.size() != 7) throw DataError(path.string() + ": malformed net.config");
  NetworkConfig nc;
  nc.classes = static_cast<std::size_t>(ncv[0]);
  nc.channels = static_cast<std::size_t>(ncv[1]);
  nc.codewords = static_cast<std::size_t>(ncv[2]);
  nc.se_reduction = static_cast<std::size_t>(ncv[3]);
  nc.slab = static_cast<std::size_t>(ncv[4]);
  nc.dropout = ncv[5];
  nc.fuse_spatial = ncv[6] != 0.0;
  if (expected && !(*expected == nc))
    throw DataError(path.string() + ": checkpoint network config does not match the requested one");

  const auto tcv = f64_values(want(blobs, "train.config", kF64, path));
  if (tcv.size() != 10) throw DataError(path.string() + ": malformed train.config");
  TrainConfig tc;
  tc.base_lr = tcv[0];
  tc.poly_power = tcv[1];
  tc.weight_decay = tcv[2];
  tc.momentum = tcv[3];
  tc.batch_size = static_cast<std::size_t>(tcv[4]);
  tc.epochs = static_cast<std::size_t>(tcv[5]);
  tc.class_weights_enabled = tcv[6] != 0.0;
  tc.loss_weights = LossWeights{tcv[7], tcv[8], tcv[9]};
  tc.seed = wire::get_u64(want(blobs, "train.seed", kU64, path).payload.data());

  Trainer t(nc, tc);
  t.iter_ = static_cast<std::size_t>(
      wire::get_u64(want(blobs, "meta.iter", kU64, path).payload.data()));
  t.sample_count_ = static_cast<std::size_t>(
      wire::get_u64(want(blobs, "meta.samples", kU64, path).payload.data()));
  {
    const Blob& b = want(blobs, "meta.rng", kU8, path);
    t.rng_.restore(std::string(b.payload.begin(), b.payload.end()));
  }
  if (auto it = blobs.find("loss.omega"); it != blobs.end())
    t.omega_.omega = f64_values(it->second);

  for (auto& e : t.net_.params().entries()) {
    const Blob& b = want(blobs, "param." + e.name, kF32, path);
    if (b.shape != e.value.shape())
      throw DataError(path.string() + ": blob param." + e.name + " has shape " +
                      shape_str(b.shape) + ", parameter wants " + shape_str(e.value.shape()));
    float* dst = e.value.values_mut().data();
    for (std::size_t i = 0; i < e.value.numel(); ++i)
      dst[i] = wire::get_f32(b.payload.data() + 4 * i);
  }
  std::size_t bi = 0;
  for (auto& e : t.net_.params().entries()) {
    if (!e.trainable) continue;
    const Blob& b = want(blobs, "opt." + e.name, kF32, path);
    if (b.numel() != e.value.numel())
      throw DataError(path.string() + ": blob opt." + e.name + " size mismatch");
    auto& buf = t.momentum_[bi++];
    for (std::size_t i = 0; i < buf.size(); ++i)
      buf[i] = wire::get_f32(b.payload.data() + 4 * i);
  }
  return t;
}

}  // namespace ffce
