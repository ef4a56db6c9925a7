// Acceptance harness: one pass/fail line per shipped guarantee, nonzero exit
// if any gate fails. Every tolerance is pinned here, next to the check that
// uses it.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ffce/cli.hpp"
#include "ffce/infer.hpp"
#include "ffce/losses.hpp"
#include "ffce/suite.hpp"
#include "ffce/train.hpp"

using namespace ffce;
namespace fs = std::filesystem;

namespace {

// --- gates -----------------------------------------------------------------
constexpr double kGradRelTol = 1e-4;     // worst analytic/numeric mismatch
constexpr double kGradSeconds = 300.0;   // whole verification sweep budget
constexpr std::size_t kGradSeeds = 20;   // random repetitions
constexpr double kLossTol = 1e-6;        // closed-form loss values
constexpr double kPermTol = 1e-10;       // encoding order-invariance, 64-bit
constexpr std::size_t kPermSeeds = 20;
constexpr double kOverfitDice = 0.95;    // held-in mean Dice after overfit
constexpr double kOverfitSeconds = 1800.0;

int failures = 0;

void report(int idx, const std::string& what, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", idx, what.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

fs::path scratch(const std::string& leaf) {
  const fs::path p = fs::temp_directory_path() / "ffce_acceptance" / leaf;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

double now_minus(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Equal-frequency striped volume: H rows split evenly across the classes,
// every slice identical, intensity graded by class plus tiny seeded jitter.
std::pair<Volume, LabelVolume> striped_volume(std::size_t depth, std::size_t classes,
                                              std::uint64_t seed) {
  const std::size_t H = 16, W = 16;
  Volume v;
  v.dims = {depth, H, W};
  v.voxels.resize(depth * H * W);
  LabelVolume l;
  l.dims = v.dims;
  l.classes = classes;
  l.labels.resize(v.voxels.size());
  Rng rng(seed);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    const std::size_t row = (i / W) % H;
    const auto c = static_cast<std::uint16_t>(row * classes / H);
    l.labels[i] = c;
    v.voxels[i] = static_cast<float>(static_cast<double>(c) / (classes - 1) + 0.02 * rng.normal());
  }
  return {std::move(v), std::move(l)};
}

bool params_identical(const FfceNet<float>& a, const FfceNet<float>& b) {
  const auto& ea = a.params().entries();
  const auto& eb = b.params().entries();
  if (ea.size() != eb.size()) return false;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (ea[i].name != eb[i].name) return false;
    const auto& va = ea[i].value.values();
    const auto& vb = eb[i].value.values();
    if (va.size() != vb.size()) return false;
    if (std::memcmp(va.data(), vb.data(), va.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

// --- 1: finite-difference gradient verification ----------------------------
void criterion_gradients() {
  SuiteOptions opt;
  opt.seeds = kGradSeeds;
  auto s = run_gradient_suite(opt);
  const bool pass = s.ok() && s.max_rel_err() < kGradRelTol && s.seconds < kGradSeconds;
  char detail[160];
  std::snprintf(detail, sizeof detail, "%zu checks, max rel err %.3g < %g, %.1fs < %.0fs",
                s.checks.size(), s.max_rel_err(), kGradRelTol, s.seconds, kGradSeconds);
  report(1, "analytic gradients match finite differences for every layer and the full network",
         pass, detail);
}

// --- 2: closed-form loss values --------------------------------------------
void criterion_loss_oracles() {
  // one pixel, two classes, predicted (0.5, 0.5)
  auto probs = Tensor<double>::from({1, 2, 1, 1}, {0.5, 0.5});
  ITensor label0{{1, 1, 1}, {0}};
  const double ce = weighted_cross_entropy(probs, label0, {1.0, 1.0}).item();  // ln 2

  auto onehot = Tensor<double>::from({1, 2, 1, 1}, {1.0, 0.0});
  const double dice = multiclass_dice_loss(probs, onehot).item();  // -0.4

  auto zeros = Tensor<double>::from({1, 2}, {0.0, 0.0});
  ITensor presence{{1, 2}, {1, 0}};
  const double sec = sec_loss(zeros, presence).item();  // ln 2

  const double ln2 = 0.6931471805599453;
  const double e_ce = std::abs(ce - ln2), e_dice = std::abs(dice - -0.4),
               e_sec = std::abs(sec - ln2);
  const bool pass = e_ce < kLossTol && e_dice < kLossTol && e_sec < kLossTol;
  char detail[160];
  std::snprintf(detail, sizeof detail, "|ce-ln2|=%.2g, |dice+0.4|=%.2g, |sec-ln2|=%.2g, all < %g",
                e_ce, e_dice, e_sec, kLossTol);
  report(2, "cross-entropy, dice and presence losses reproduce hand-computed values", pass,
         detail);
}

// --- 3: encoding summary is order-invariant --------------------------------
void criterion_permutation() {
  const std::size_t C = 8, K = 4, h = 5, w = 7, P = h * w;
  double worst = 0.0;
  for (std::size_t s = 0; s < kPermSeeds; ++s) {
    Rng rng(400 + s);
    ParamStore<double> ps;
    auto enc = EncodingLayer<double>::create(ps, "enc", K, C, rng);

    std::vector<double> base(C * P);
    for (auto& v : base) v = rng.normal();
    std::vector<std::size_t> perm(P);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = P; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    std::vector<double> shuffled(C * P);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) shuffled[c * P + perm[p]] = base[c * P + p];

    auto e0 = enc(Tensor<double>::from({1, C, h, w}, std::move(base)));
    auto e1 = enc(Tensor<double>::from({1, C, h, w}, std::move(shuffled)));
    for (std::size_t i = 0; i < C; ++i)
      worst = std::max(worst, std::abs(e0.values()[i] - e1.values()[i]));
  }
  char detail[120];
  std::snprintf(detail, sizeof detail, "%zu seeds, max abs deviation %.3g < %g", kPermSeeds,
                worst, kPermTol);
  report(3, "codeword summary unchanged under spatial permutation of the features",
         worst < kPermTol, detail);
}

// --- 4: gate override identities -------------------------------------------
void criterion_gamma() {
  NetworkConfig nc;
  nc.classes = 3;
  nc.channels = 4;
  nc.codewords = 2;
  nc.slab = 2;
  nc.dropout = 0.0;
  auto net = FfceNet<float>::build(nc, 21);

  Rng rng(22);
  std::vector<float> pv(2 * 1 * 16 * 16), sv(2 * 2 * 16 * 16);
  for (auto& v : pv) v = static_cast<float>(rng.normal());
  for (auto& v : sv) v = static_cast<float>(rng.normal());
  auto planar = Tensor<float>::from({2, 1, 16, 16}, pv);
  auto slab = Tensor<float>::from({2, 2, 16, 16}, sv);

  FwdCtx<float> bypass;
  bypass.bypass_gamma = true;
  auto raw = net.forward(planar, slab, bypass);

  FwdCtx<float> ones;
  ones.gamma_override = Tensor<float>::full({2, 3}, 1.0f);
  auto gated1 = net.forward(planar, slab, ones);

  bool identity = raw.gated.values().size() == gated1.gated.values().size();
  for (std::size_t i = 0; identity && i < raw.gated.values().size(); ++i)
    identity = raw.gated.values()[i] == gated1.gated.values()[i];  // bit-exact

  FwdCtx<float> kill;
  kill.gamma_override = Tensor<float>::from({2, 3}, {1.0f, 0.0f, 1.0f, 1.0f, 0.0f, 1.0f});
  auto gated0 = net.forward(planar, slab, kill);
  bool zeroed = true;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        zeroed = zeroed && gated0.gated.at({n, 1, y, x}) == 0.0f;

  report(4, "unit gates leave logits bit-identical and a zero gate silences its class channel",
         identity && zeroed,
         std::string(identity ? "unit-gate identity exact" : "unit-gate identity BROKEN") +
             (zeroed ? ", zeroed channel exact" : ", zeroed channel BROKEN"));
}

// --- 5: overfit a small synthetic dataset ----------------------------------
double train_and_score(const std::vector<std::pair<Volume, LabelVolume>>& data, bool fused,
                       double* seconds) {
  NetworkConfig nc;
  nc.classes = 5;
  nc.channels = 8;
  nc.codewords = 8;
  nc.slab = 4;
  nc.dropout = 0.0;  // overfit on purpose
  nc.fuse_spatial = fused;
  TrainConfig tc;
  tc.base_lr = 0.01;
  tc.epochs = 60;
  tc.batch_size = 4;
  tc.seed = 7;

  const auto t0 = std::chrono::steady_clock::now();
  Trainer tr(nc, tc);
  tr.attach_data(data);
  while (tr.iteration() < tr.iterations_total()) tr.train_epoch();

  double acc = 0.0;
  for (const auto& [vol, gt] : data)
    acc += evaluate_dice(segment_volume(tr.net(), vol).prediction, gt).mean_dice;
  *seconds = now_minus(t0);
  return acc / static_cast<double>(data.size());
}

void criterion_overfit() {
  const auto dir = scratch("overfit");
  auto man = generate_synthetic_dataset(7, 8, {32, 32, 32}, 5, dir);
  man.stack = 4;
  auto data = load_dataset(man);

  double fused_s = 0.0, planar_s = 0.0;
  const double fused = train_and_score(data, true, &fused_s);
  const double planar = train_and_score(data, false, &planar_s);

  const bool pass = fused >= kOverfitDice && fused_s < kOverfitSeconds && fused >= planar;
  char detail[200];
  std::snprintf(detail, sizeof detail,
                "fused dice %.4f >= %.2f in %.0fs < %.0fs; planar dice %.4f <= fused", fused,
                kOverfitDice, fused_s, kOverfitSeconds, planar);
  report(5, "training overfits held-in synthetic volumes and slab fusion never hurts", pass,
         detail);
}

// --- 6: class weighting is inert at equal frequencies ----------------------
void criterion_weight_parity() {
  std::vector<std::pair<Volume, LabelVolume>> data;
  data.push_back(striped_volume(2, 4, 3));

  NetworkConfig nc;
  nc.classes = 4;
  nc.channels = 4;
  nc.codewords = 2;
  nc.slab = 2;
  nc.dropout = 0.0;
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 2;
  tc.seed = 9;

  TrainConfig weighted = tc;
  weighted.class_weights_enabled = true;

  Trainer a(nc, tc), b(nc, weighted);
  a.attach_data(data);
  b.attach_data(data);

  bool omega_unit = true;
  for (double w : b.class_weights().omega) omega_unit = omega_unit && w == 1.0;

  bool traj = true;
  for (int e = 0; e < 2; ++e) {
    const auto ra = a.train_epoch(), rb = b.train_epoch();
    traj = traj && ra.total == rb.total && ra.ce == rb.ce && ra.dice == rb.dice &&
           ra.sec == rb.sec;
  }
  const bool same_params = params_identical(a.net(), b.net());
  report(6, "with equal class frequencies, weighted and unweighted training are bit-identical",
         omega_unit && traj && same_params,
         std::string(omega_unit ? "weights exactly 1" : "weights NOT 1") +
             (traj ? ", losses bitwise equal" : ", losses DIVERGED") +
             (same_params ? ", parameters bitwise equal" : ", parameters DIVERGED"));
}

// --- 7: determinism and save/resume ---------------------------------------
void criterion_determinism() {
  const auto dir = scratch("determinism");
  std::vector<std::pair<Volume, LabelVolume>> data;
  data.push_back(striped_volume(3, 3, 4));

  NetworkConfig nc;
  nc.classes = 3;
  nc.channels = 4;
  nc.codewords = 2;
  nc.slab = 2;
  nc.dropout = 0.1;  // exercises the checkpointed rng stream
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 3;
  tc.seed = 12;

  auto run = [&](const fs::path& out, int stop_after, const fs::path* resume_to) {
    Trainer tr(nc, tc);
    tr.attach_data(data);
    for (int e = 0; e < stop_after; ++e) tr.train_epoch();
    if (!resume_to) {
      while (tr.iteration() < tr.iterations_total()) tr.train_epoch();
      tr.save_checkpoint(out);
      return;
    }
    tr.save_checkpoint(*resume_to);
    Trainer back = Trainer::load_checkpoint(*resume_to);
    back.attach_data(data);
    while (back.iteration() < back.iterations_total()) back.train_epoch();
    back.save_checkpoint(out);
  };

  run(dir / "a.ffck", 0, nullptr);
  run(dir / "b.ffck", 0, nullptr);
  const bool seeded = slurp(dir / "a.ffck") == slurp(dir / "b.ffck");

  const fs::path mid = dir / "mid.ffck";
  run(dir / "resumed.ffck", 2, &mid);
  const bool resumed = slurp(dir / "a.ffck") == slurp(dir / "resumed.ffck");

  report(7, "identical seeds give byte-identical checkpoints and resume matches straight-through",
         seeded && resumed,
         std::string(seeded ? "reruns byte-identical" : "reruns DIFFER") +
             (resumed ? ", resume byte-identical" : ", resume DIFFERS"));
}

// --- 8: container roundtrips and corruption rejection ----------------------
void criterion_formats() {
  const auto dir = scratch("formats");

  Volume v;
  v.dims = {2, 3, 4};
  v.voxels.resize(24);
  for (std::size_t i = 0; i < 24; ++i) v.voxels[i] = static_cast<float>((i - 11.5) * 0.37);
  v.voxels[0] = -0.0f;
  write_volume(v, dir / "v1.mvol");
  write_volume(read_volume(dir / "v1.mvol"), dir / "v2.mvol");

  LabelVolume l;
  l.dims = {2, 3, 4};
  l.classes = 7;
  for (std::size_t i = 0; i < 24; ++i) l.labels.push_back(static_cast<std::uint16_t>(i % 7));
  write_labels(l, dir / "l1.mvol");
  write_labels(read_labels(dir / "l1.mvol"), dir / "l2.mvol");

  const bool vol_rt = slurp(dir / "v1.mvol") == slurp(dir / "v2.mvol");
  const bool lab_rt = slurp(dir / "l1.mvol") == slurp(dir / "l2.mvol");

  NetworkConfig nc;
  nc.classes = 3;
  nc.channels = 4;
  nc.codewords = 2;
  nc.slab = 2;
  Trainer tr(nc, TrainConfig{});
  tr.save_checkpoint(dir / "c1.ffck");
  Trainer::load_checkpoint(dir / "c1.ffck").save_checkpoint(dir / "c2.ffck");
  const bool ck_rt = slurp(dir / "c1.ffck") == slurp(dir / "c2.ffck");

  auto corrupt_first_byte = [&](const fs::path& src, const fs::path& dst) {
    std::string bytes = slurp(src);
    bytes[0] = 'X';
    std::ofstream(dst, std::ios::binary).write(bytes.data(), bytes.size());
  };
  corrupt_first_byte(dir / "l1.mvol", dir / "bad.mvol");
  corrupt_first_byte(dir / "c1.ffck", dir / "bad.ffck");
  std::ostringstream sink;  // keep the rejection diagnostics off our report
  auto* old_cerr = std::cerr.rdbuf(sink.rdbuf());
  const int mvol_code = cli_run({"eval", "--pred", (dir / "bad.mvol").string(), "--gt",
                                 (dir / "l1.mvol").string(), "--report",
                                 (dir / "r.json").string()});
  const int ckpt_code = cli_run({"infer", "--ckpt", (dir / "bad.ffck").string(), "--in",
                                 (dir / "v1.mvol").string(), "--out",
                                 (dir / "o.mvol").string()});
  std::cerr.rdbuf(old_cerr);

  const bool pass = vol_rt && lab_rt && ck_rt && mvol_code != 0 && ckpt_code != 0;
  char detail[200];
  std::snprintf(detail, sizeof detail,
                "volume roundtrip %s, label roundtrip %s, checkpoint roundtrip %s, "
                "corrupted magic -> exit %d and %d",
                vol_rt ? "byte-exact" : "BROKEN", lab_rt ? "byte-exact" : "BROKEN",
                ck_rt ? "byte-exact" : "BROKEN", mvol_code, ckpt_code);
  report(8, "volume and checkpoint files roundtrip byte-exactly and corruption is rejected", pass,
         detail);
}

}  // namespace

int main() {
  criterion_gradients();
  criterion_loss_oracles();
  criterion_permutation();
  criterion_gamma();
  criterion_overfit();
  criterion_weight_parity();
  criterion_determinism();
  criterion_formats();
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
