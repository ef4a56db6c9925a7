#include "ffce/cli.hpp"

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "ffce/infer.hpp"
#include "ffce/suite.hpp"
#include "ffce/train.hpp"

namespace ffce {
namespace {

Dims3 parse_dims(const std::string& s) {
  Dims3 d{};
  char extra = 0;
  if (std::sscanf(s.c_str(), "%zu,%zu,%zu%c", &d[0], &d[1], &d[2], &extra) != 3)
    throw std::invalid_argument("--dims expects D,H,W (e.g. 32,32,32), got \"" + s + "\"");
  return d;
}

struct SynthArgs {
  std::uint64_t seed = 1;
  std::size_t volumes = 4;
  std::string dims = "32,32,32";
  std::size_t classes = 5;
  std::string out;
};

struct TrainArgs {
  std::string manifest, out, resume;
  NetworkConfig net;
  TrainConfig train;
  bool planar_only = false;
  bool normalize = false;
};

struct InferArgs {
  std::string ckpt, in, out;
  bool normalize = false;
};

struct EvalArgs {
  std::string pred, gt, report, format = "json";
};

struct ReportArgs {
  std::string in, out, format = "csv";
};

int run_synth(const SynthArgs& a) {
  auto man = generate_synthetic_dataset(a.seed, a.volumes, parse_dims(a.dims), a.classes, a.out);
  std::cout << "wrote " << man.entries.size() << " volume/label pairs and manifest.tsv under "
            << a.out << "\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  auto data = load_dataset(load_manifest(a.manifest));
  if (a.normalize)
    for (auto& [img, lab] : data) normalize_unit_range(img);

  Trainer tr = [&] {
    if (!a.resume.empty()) {
      std::cout << "resuming from " << a.resume << " (its stored configuration wins)\n";
      return Trainer::load_checkpoint(a.resume);
    }
    NetworkConfig nc = a.net;
    if (a.planar_only) nc.fuse_spatial = false;
    return Trainer(nc, a.train);
  }();
  tr.attach_data(data);

  while (tr.iteration() < tr.iterations_total()) {
    const auto r = tr.train_epoch();
    std::printf("epoch %zu/%zu  total %.6f  ce %.6f  dice %.6f  sec %.6f\n", tr.epochs_done(),
                tr.train_config().epochs, r.total, r.ce, r.dice, r.sec);
  }
  tr.save_checkpoint(a.out);
  std::cout << "checkpoint written to " << a.out << "\n";
  return 0;
}

int run_infer(const InferArgs& a) {
  Trainer tr = Trainer::load_checkpoint(a.ckpt);
  Volume vol = read_volume(a.in);
  if (a.normalize) normalize_unit_range(vol);
  auto seg = segment_volume(tr.net(), vol);
  write_labels(seg.prediction, a.out);
  std::printf("segmented %zux%zux%zu in %.3fs -> %s\n", vol.dims[0], vol.dims[1], vol.dims[2],
              seg.seconds, a.out.c_str());
  return 0;
}

int run_eval(const EvalArgs& a) {
  LabelVolume pred = read_labels(a.pred);
  LabelVolume gt = read_labels(a.gt);
  auto m = evaluate_dice(pred, gt);
  emit_report(m, a.format, a.report);
  std::printf("mean dice %.4f -> %s\n", m.mean_dice, a.report.c_str());
  return 0;
}

int run_report(const ReportArgs& a) {
  emit_report(parse_report(a.in), a.format, a.out);
  std::cout << "report written to " << a.out << "\n";
  return 0;
}

int run_gradcheck(std::size_t seeds) {
  SuiteOptions opt;
  opt.seeds = seeds;
  opt.log = &std::cout;
  auto s = run_gradient_suite(opt);
  std::printf("%s: %zu checks, max relative error %.3g, %.1fs\n",
              s.ok() ? "all gradients verified" : "GRADIENT MISMATCH", s.checks.size(),
              s.max_rel_err(), s.seconds);
  return s.ok() ? 0 : 2;
}

}  // namespace

int cli_run(int argc, const char* const* argv) {
  CLI::App app{"feature-fused context-encoding segmentation toolkit"};
  app.require_subcommand(1);

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "generate a synthetic labelled dataset");
  synth->add_option("--seed", sy.seed, "rng seed");
  synth->add_option("--volumes", sy.volumes, "number of volumes");
  synth->add_option("--dims", sy.dims, "volume extents D,H,W");
  synth->add_option("--classes", sy.classes, "label classes incl. background");
  synth->add_option("--out", sy.out, "output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model on a manifest of volumes");
  train->add_option("--manifest", ta.manifest, "TSV of image<TAB>label pairs")->required();
  train->add_option("--out", ta.out, "checkpoint path to write")->required();
  train->add_option("--resume", ta.resume, "checkpoint to continue (its config wins)");
  train->add_option("--classes", ta.net.classes, "label classes incl. background");
  train->add_option("--stack", ta.net.slab, "slices per depth stack");
  train->add_option("--channels", ta.net.channels, "feature channels per block");
  train->add_option("--codewords", ta.net.codewords, "codewords in the encoding layer");
  train->add_option("--se-reduction", ta.net.se_reduction, "channel-gate bottleneck divisor");
  train->add_option("--dropout", ta.net.dropout, "dropout rate inside blocks");
  train->add_flag("--planar-only", ta.planar_only, "disable the depth-stack encoder path");
  train->add_option("--epochs", ta.train.epochs, "epochs to schedule");
  train->add_option("--base-lr", ta.train.base_lr, "initial learning rate");
  train->add_option("--batch", ta.train.batch_size, "slices per batch");
  train->add_option("--seed", ta.train.seed, "init/shuffle seed");
  train->add_option("--weight-decay", ta.train.weight_decay, "L2 coupling");
  train->add_option("--momentum", ta.train.momentum, "SGD momentum");
  train->add_option("--poly-power", ta.train.poly_power, "lr decay exponent");
  train->add_flag("--class-weights", ta.train.class_weights_enabled,
                  "median-frequency class weighting in the cross-entropy term");
  train->add_flag("--normalize", ta.normalize, "min-max rescale intensities to [0,1]");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "segment a volume with a trained checkpoint");
  infer->add_option("--ckpt", ia.ckpt, "checkpoint path")->required();
  infer->add_option("--in", ia.in, "input volume (.mvol)")->required();
  infer->add_option("--out", ia.out, "label volume to write (.mvol)")->required();
  infer->add_flag("--normalize", ia.normalize, "min-max rescale intensities to [0,1]");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "score a segmentation against ground truth");
  eval->add_option("--pred", ea.pred, "predicted label volume")->required();
  eval->add_option("--gt", ea.gt, "ground-truth label volume")->required();
  eval->add_option("--report", ea.report, "report file to write")->required();
  eval->add_option("--format", ea.format, "json or csv");

  std::size_t gc_seeds = 20;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("--seeds", gc_seeds, "random repetitions per check");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "re-render a JSON report in another format");
  report->add_option("--in", ra.in, "JSON report to read")->required();
  report->add_option("--out", ra.out, "file to write")->required();
  report->add_option("--format", ra.format, "json or csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the diagnostic
    return 1;
  }

  try {
    if (synth->parsed()) return run_synth(sy);
    if (train->parsed()) return run_train(ta);
    if (infer->parsed()) return run_infer(ia);
    if (eval->parsed()) return run_eval(ea);
    if (gradcheck->parsed()) return run_gradcheck(gc_seeds);
    if (report->parsed()) return run_report(ra);
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int cli_run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"ffce"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace ffce
