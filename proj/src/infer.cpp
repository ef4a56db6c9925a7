#include "ffce/infer.hpp"

#include <chrono>
#include <fstream>

#include <nlohmann/json.hpp>

namespace ffce {

SegmentationResult segment_volume(const FfceNet<float>& net, const Volume& vol) {
  const NetworkConfig& cfg = net.config();
  const std::size_t D = vol.dims[0], H = vol.dims[1], W = vol.dims[2];
  if (H % 16 != 0 || W % 16 != 0)
    throw DataError("segment: volume " + vol.id + " planes are " + std::to_string(H) + "x" +
                    std::to_string(W) + "; both extents must be divisible by 16");

  const auto t0 = std::chrono::steady_clock::now();
  SegmentationResult res;
  res.prediction.dims = vol.dims;
  res.prediction.labels.resize(D * H * W);
  res.prediction.classes = cfg.classes;
  res.prediction.id = vol.id;
  res.gamma.reserve(D);

  FwdCtx<float> ctx;  // eval mode
  const std::size_t L = cfg.classes, plane = H * W;
  for (std::size_t i = 0; i < D; ++i) {
    SliceSample s = extract_slice_sample(vol, nullptr, i, cfg.slab, cfg.classes);
    auto planar = Tensor<float>::from({1, H, W}, std::move(s.slice));
    auto slab = Tensor<float>::from({cfg.slab, H, W}, std::move(s.stack));
    auto out = net.forward_single(planar, slab, ctx);

    const auto p = out.probs.values();  // {1, L, H, W}
    std::int32_t* dst = res.prediction.labels.data() + i * plane;
    for (std::size_t px = 0; px < plane; ++px) {
      std::size_t best = 0;
      float best_p = p[px];
      for (std::size_t l = 1; l < L; ++l) {
        const float v = p[l * plane + px];
        if (v > best_p) {  // strict: ties keep the lowest class
          best_p = v;
          best = l;
        }
      }
      dst[px] = static_cast<std::int32_t>(best);
    }
    const auto g = out.gamma.values();
    res.gamma.emplace_back(g.begin(), g.end());
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

MetricsReport evaluate_dice(const LabelVolume& pred, const LabelVolume& gt) {
  if (pred.dims != gt.dims)
    throw DataError("evaluate: prediction is " + std::to_string(pred.dims[0]) + "x" +
                    std::to_string(pred.dims[1]) + "x" + std::to_string(pred.dims[2]) +
                    ", ground truth is " + std::to_string(gt.dims[0]) + "x" +
                    std::to_string(gt.dims[1]) + "x" + std::to_string(gt.dims[2]));
  const std::size_t L = std::max(pred.classes, gt.classes);

  std::vector<std::size_t> np(L, 0), ng(L, 0), inter(L, 0);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const auto a = static_cast<std::size_t>(pred.labels[i]);
    const auto b = static_cast<std::size_t>(gt.labels[i]);
    ++np[a];
    ++ng[b];
    if (a == b) ++inter[a];
  }

  MetricsReport m;
  m.per_class.resize(L);
  m.included.resize(L);
  m.pred_voxels = np;
  m.gt_voxels = ng;
  double sum = 0.0;
  std::size_t n_inc = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t mass = np[l] + ng[l];
    m.per_class[l] = mass == 0 ? 1.0
                               : 2.0 * static_cast<double>(inter[l]) / static_cast<double>(mass);
    m.included[l] = l > 0 && mass > 0;
    if (m.included[l]) {
      sum += m.per_class[l];
      ++n_inc;
    }
  }
  // no non-background class anywhere -> vacuously perfect agreement
  m.mean_dice = n_inc ? sum / static_cast<double>(n_inc) : 1.0;
  return m;
}

namespace {

nlohmann::ordered_json report_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  j["per_class"] = m.per_class;
  j["mean_dice"] = m.mean_dice;
  j["voxel_counts"] = {{"pred", m.pred_voxels}, {"gt", m.gt_voxels}};
  j["runtime_seconds"] = m.runtime_seconds;
  return j;
}

}  // namespace

std::string render_report(const MetricsReport& m, const std::string& format) {
  if (format == "json") return report_json(m).dump(2) + "\n";
  if (format == "csv") {
    std::string out = "class,dice,pred_voxels,gt_voxels\n";
    char line[128];
    for (std::size_t l = 0; l < m.per_class.size(); ++l) {
      if (!m.included[l]) continue;
      std::snprintf(line, sizeof line, "%zu,%.10g,%zu,%zu\n", l, m.per_class[l], m.pred_voxels[l],
                    m.gt_voxels[l]);
      out += line;
    }
    std::snprintf(line, sizeof line, "MEAN,%.10g,,\n", m.mean_dice);
    out += line;
    return out;
  }
  throw std::invalid_argument("report format must be json or csv, got \"" + format + "\"");
}

void emit_report(const MetricsReport& m, const std::string& format,
                 const std::filesystem::path& path) {
  const std::string body = render_report(m, format);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!os) throw DataError("short write to " + path.string());
}

MetricsReport parse_report(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  MetricsReport m;
  try {
    m.per_class = j.at("per_class").get<std::vector<double>>();
    m.mean_dice = j.at("mean_dice").get<double>();
    m.pred_voxels = j.at("voxel_counts").at("pred").get<std::vector<std::size_t>>();
    m.gt_voxels = j.at("voxel_counts").at("gt").get<std::vector<std::size_t>>();
    m.runtime_seconds = j.at("runtime_seconds").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  const std::size_t L = m.per_class.size();
  if (m.pred_voxels.size() != L || m.gt_voxels.size() != L)
    throw DataError(path.string() + ": voxel count arrays do not match per_class length");
  m.included.resize(L);
  for (std::size_t l = 0; l < L; ++l)
    m.included[l] = l > 0 && m.pred_voxels[l] + m.gt_voxels[l] > 0;
  return m;
}

}  // namespace ffce
