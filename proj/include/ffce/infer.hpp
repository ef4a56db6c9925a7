#pragma once

// Whole-volume segmentation by coronal-slice iteration, per-class Dice
// evaluation and report emission (JSON / CSV).

#include "ffce/net.hpp"
#include "ffce/volume.hpp"

namespace ffce {

struct SegmentationResult {
  LabelVolume prediction;                 // dims match the input volume
  std::vector<std::vector<float>> gamma;  // per coronal slice, length-L gate vector
  double seconds = 0.0;                   // wall clock for the whole volume
};

struct MetricsReport {
  std::vector<double> per_class;         // Dice per class, absent-from-both scored 1
  std::vector<bool> included;            // counted in the mean: non-background, present somewhere
  std::vector<std::size_t> pred_voxels;  // per-class voxel counts
  std::vector<std::size_t> gt_voxels;
  double mean_dice = 0.0;  // arithmetic mean over included classes; 1 when none qualify
  double runtime_seconds = 0.0;
};

// Runs the model in eval mode on every coronal plane; per-pixel argmax over
// the class probabilities, ties resolved to the lowest class index.
SegmentationResult segment_volume(const FfceNet<float>& net, const Volume& vol);

// Per-class Dice 2|P∩G|/(|P|+|G|). Background (class 0) and classes absent
// from both volumes stay in per_class but are excluded from the mean.
MetricsReport evaluate_dice(const LabelVolume& pred, const LabelVolume& gt);

// format is "json" or "csv"; anything else is rejected. Output is
// deterministic: the same report always renders to identical bytes.
std::string render_report(const MetricsReport& m, const std::string& format);
void emit_report(const MetricsReport& m, const std::string& format,
                 const std::filesystem::path& path);

// Reads back a JSON report written by emit_report.
MetricsReport parse_report(const std::filesystem::path& path);

}  // namespace ffce
