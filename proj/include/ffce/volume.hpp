#pragma once

// Volumetric data: the MVOL binary container, coronal slice/stack extraction,
// manifest handling, and a deterministic synthetic dataset generator used in
// place of real scans. Axis 0 of every volume indexes coronal planes.

#include <array>
#include <filesystem>
#include <variant>

#include "ffce/common.hpp"
#include "ffce/losses.hpp"

namespace ffce {

using Dims3 = std::array<std::size_t, 3>;  // D, H, W

struct Volume {
  Dims3 dims{};
  std::vector<float> voxels;  // row-major, W fastest
  std::string id;

  std::size_t numel() const { return dims[0] * dims[1] * dims[2]; }
};

struct LabelVolume {
  Dims3 dims{};
  std::vector<std::int32_t> labels;
  std::size_t classes = 0;  // exclusive upper bound on stored labels
  std::string id;

  std::size_t numel() const { return dims[0] * dims[1] * dims[2]; }
};

// One training/inference unit: a coronal plane, its surrounding plane stack
// with depth treated as channels, and (when labelled) the ground truth plane
// plus the classes present in it.
struct SliceSample {
  std::size_t h = 0, w = 0, stack_size = 0, classes = 0;
  std::vector<float> slice;            // h*w
  std::vector<float> stack;            // stack_size*h*w
  std::vector<std::int32_t> gt;        // h*w; empty when unlabelled
  std::vector<std::int32_t> presence;  // classes; empty when unlabelled
  std::string volume_id;
  std::size_t coronal_index = 0;
};

struct ManifestEntry {
  std::filesystem::path image, label;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string split = "train";
  std::size_t classes = 0;  // L, supplied by the caller, not stored in the file
  std::size_t stack = 1;    // S
};

// ---------------------------------------------------------------------------
// MVOL container

void write_volume(const Volume& v, const std::filesystem::path& path);
void write_labels(const LabelVolume& v, const std::filesystem::path& path);
std::variant<Volume, LabelVolume> read_mvol(const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);     // rejects label payloads
LabelVolume read_labels(const std::filesystem::path& path);  // rejects intensity payloads

// Min-max rescale of the voxel intensities to [0, 1] in place; a constant
// volume maps to all zeros. Opt-in (--normalize on the CLI), default off.
void normalize_unit_range(Volume& v);

// ---------------------------------------------------------------------------
// sample extraction

std::vector<std::int32_t> presence_vector(const std::vector<std::int32_t>& gt,
                                          std::size_t classes);

// Stack window: planes [i - floor((S-1)/2), i + ceil((S-1)/2)], out-of-range
// indices clamped to the boundary plane. labels may be null for inference.
SliceSample extract_slice_sample(const Volume& vol, const LabelVolume* labels, std::size_t index,
                                 std::size_t stack_size, std::size_t classes);

// ---------------------------------------------------------------------------
// manifests and datasets

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

std::vector<std::pair<Volume, LabelVolume>> load_dataset(const DatasetManifest& m);

// Nested ellipsoidal regions with class-graded intensities plus Gaussian
// noise; labels are the noiseless region map. Deterministic in seed; writes
// vol_###.mvol / lab_###.mvol / manifest.tsv under out_dir.
DatasetManifest generate_synthetic_dataset(std::uint64_t seed, std::size_t volumes, Dims3 dims,
                                           std::size_t classes,
                                           const std::filesystem::path& out_dir);

ClassWeights compute_class_weights(const std::vector<LabelVolume>& vols, std::size_t classes);

inline ClassWeights compute_class_weights(const std::vector<std::pair<Volume, LabelVolume>>& data,
                                          std::size_t classes) {
  std::vector<LabelVolume> vols;
  vols.reserve(data.size());
  for (const auto& [img, lab] : data) vols.push_back(lab);
  return compute_class_weights(vols, classes);
}

}  // namespace ffce
