#include "ffce/volume.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "ffce/wire.hpp"

namespace ffce {

using namespace wire;

namespace {

constexpr char kMagic[4] = {'M', 'V', 'O', 'L'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeU16 = 1;
constexpr std::size_t kHeaderSize = 32;

std::vector<std::uint8_t> make_header(std::uint8_t dtype, Dims3 dims) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize);
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(dtype);
  out.push_back(0);
  out.push_back(0);
  for (std::size_t d : dims) put_u64(out, d);
  return out;
}

struct ParsedHeader {
  std::uint8_t dtype;
  Dims3 dims;
};

ParsedHeader parse_header(const std::filesystem::path& path,
                          const std::vector<std::uint8_t>& bytes) {
  const std::string where = path.string() + ": ";
  if (bytes.size() < kHeaderSize)
    throw DataError(where + "file too short for header (" + std::to_string(bytes.size()) +
                    " bytes, need 32)");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw DataError(where + "bad magic at byte offset 0");
  if (bytes[4] != kVersion)
    throw DataError(where + "unsupported version " + std::to_string(bytes[4]) +
                    " at byte offset 4");
  if (bytes[5] != kDtypeF32 && bytes[5] != kDtypeU16)
    throw DataError(where + "unknown dtype code " + std::to_string(bytes[5]) +
                    " at byte offset 5");
  if (bytes[6] != 0 || bytes[7] != 0)
    throw DataError(where + "nonzero reserved bytes at byte offset 6");
  ParsedHeader h;
  h.dtype = bytes[5];
  for (std::size_t i = 0; i < 3; ++i) {
    const std::uint64_t e = get_u64(bytes.data() + 8 + 8 * i);
    if (e == 0)
      throw DataError(where + "zero extent at byte offset " + std::to_string(8 + 8 * i));
    h.dims[i] = static_cast<std::size_t>(e);
  }
  const std::size_t n = h.dims[0] * h.dims[1] * h.dims[2];
  const std::size_t esize = h.dtype == kDtypeF32 ? 4 : 2;
  if (bytes.size() - kHeaderSize != n * esize)
    throw DataError(where + "payload size mismatch: header promises " + std::to_string(n * esize) +
                    " bytes from byte offset 32, file has " +
                    std::to_string(bytes.size() - kHeaderSize));
  return h;
}

}  // namespace

void write_volume(const Volume& v, const std::filesystem::path& path) {
  if (v.voxels.size() != v.numel())
    throw std::invalid_argument(path.string() + ": " + std::to_string(v.voxels.size()) +
                                " voxels for dims promising " + std::to_string(v.numel()));
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    if (!std::isfinite(v.voxels[i]))
      throw std::invalid_argument(path.string() + ": non-finite intensity at byte offset " +
                                  std::to_string(kHeaderSize + 4 * i));
  auto bytes = make_header(kDtypeF32, v.dims);
  bytes.reserve(kHeaderSize + 4 * v.voxels.size());
  for (float x : v.voxels) put_f32(bytes, x);
  write_file(path, bytes);
}

void write_labels(const LabelVolume& v, const std::filesystem::path& path) {
  if (v.labels.size() != v.numel())
    throw std::invalid_argument(path.string() + ": " + std::to_string(v.labels.size()) +
                                " labels for dims promising " + std::to_string(v.numel()));
  auto bytes = make_header(kDtypeU16, v.dims);
  bytes.reserve(kHeaderSize + 2 * v.labels.size());
  for (std::int32_t x : v.labels) {
    if (x < 0 || x > 0xFFFF)
      throw std::invalid_argument(path.string() + ": label " + std::to_string(x) +
                                  " not representable as 16-bit unsigned");
    put_u16(bytes, static_cast<std::uint16_t>(x));
  }
  write_file(path, bytes);
}

std::variant<Volume, LabelVolume> read_mvol(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto h = parse_header(path, bytes);
  const std::size_t n = h.dims[0] * h.dims[1] * h.dims[2];
  if (h.dtype == kDtypeF32) {
    Volume v;
    v.dims = h.dims;
    v.id = path.stem().string();
    v.voxels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      v.voxels[i] = get_f32(bytes.data() + kHeaderSize + 4 * i);
      if (!std::isfinite(v.voxels[i]))
        throw DataError(path.string() + ": non-finite intensity at byte offset " +
                        std::to_string(kHeaderSize + 4 * i));
    }
    return v;
  }
  LabelVolume v;
  v.dims = h.dims;
  v.id = path.stem().string();
  v.labels.resize(n);
  std::int32_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    v.labels[i] = get_u16(bytes.data() + kHeaderSize + 2 * i);
    max_label = std::max(max_label, v.labels[i]);
  }
  v.classes = static_cast<std::size_t>(max_label) + 1;
  return v;
}

Volume read_volume(const std::filesystem::path& path) {
  auto v = read_mvol(path);
  if (!std::holds_alternative<Volume>(v))
    throw DataError(path.string() + ": expected intensity volume, found label payload");
  return std::get<Volume>(std::move(v));
}

LabelVolume read_labels(const std::filesystem::path& path) {
  auto v = read_mvol(path);
  if (!std::holds_alternative<LabelVolume>(v))
    throw DataError(path.string() + ": expected label volume, found intensity payload");
  return std::get<LabelVolume>(std::move(v));
}

void normalize_unit_range(Volume& v) {
  if (v.voxels.empty()) return;
  auto [lo, hi] = std::minmax_element(v.voxels.begin(), v.voxels.end());
  const float base = *lo, span = *hi - *lo;
  if (span == 0.0f) {
    std::fill(v.voxels.begin(), v.voxels.end(), 0.0f);
    return;
  }
  for (float& x : v.voxels) x = (x - base) / span;
}

std::vector<std::int32_t> presence_vector(const std::vector<std::int32_t>& gt,
                                          std::size_t classes) {
  std::vector<std::int32_t> p(classes, 0);
  for (std::int32_t g : gt) {
    if (g < 0 || static_cast<std::size_t>(g) >= classes)
      throw std::invalid_argument("presence: label " + std::to_string(g) + " outside [0," +
                                  std::to_string(classes) + ")");
    p[static_cast<std::size_t>(g)] = 1;
  }
  return p;
}

SliceSample extract_slice_sample(const Volume& vol, const LabelVolume* labels, std::size_t index,
                                 std::size_t stack_size, std::size_t classes) {
  const auto [D, H, W] = vol.dims;
  if (index >= D)
    throw std::invalid_argument("slice index " + std::to_string(index) + " outside volume depth " +
                                std::to_string(D));
  if (stack_size == 0) throw std::invalid_argument("stack size must be at least 1");
  if (labels && labels->dims != vol.dims)
    throw std::invalid_argument("label dims do not match volume " + vol.id);

  SliceSample s;
  s.h = H;
  s.w = W;
  s.stack_size = stack_size;
  s.classes = classes;
  s.volume_id = vol.id;
  s.coronal_index = index;

  const std::size_t plane = H * W;
  s.slice.assign(vol.voxels.begin() + static_cast<std::ptrdiff_t>(index * plane),
                 vol.voxels.begin() + static_cast<std::ptrdiff_t>((index + 1) * plane));
  s.stack.resize(stack_size * plane);
  const long lead = static_cast<long>((stack_size - 1) / 2);
  for (std::size_t k = 0; k < stack_size; ++k) {
    long p = static_cast<long>(index) - lead + static_cast<long>(k);
    p = std::clamp(p, 0L, static_cast<long>(D) - 1);
    std::memcpy(s.stack.data() + k * plane,
                vol.voxels.data() + static_cast<std::size_t>(p) * plane, plane * sizeof(float));
  }
  if (labels) {
    s.gt.assign(labels->labels.begin() + static_cast<std::ptrdiff_t>(index * plane),
                labels->labels.begin() + static_cast<std::ptrdiff_t>((index + 1) * plane));
    s.presence = presence_vector(s.gt, classes);
  }
  return s;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError(path.string() + ": cannot open manifest");
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": expected image<TAB>label");
    ManifestEntry e;
    e.image = line.substr(0, tab);
    e.label = line.substr(tab + 1);
    if (e.image.is_relative()) e.image = base / e.image;
    if (e.label.is_relative()) e.label = base / e.label;
    for (const auto& p : {e.image, e.label})
      if (!std::filesystem::exists(p))
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": missing file " +
                        p.string());
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw DataError(path.string() + ": manifest lists no volumes");
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError(path.string() + ": cannot open for writing");
  for (const auto& e : m.entries) f << e.image.string() << '\t' << e.label.string() << '\n';
  if (!f) throw DataError(path.string() + ": write failed");
}

std::vector<std::pair<Volume, LabelVolume>> load_dataset(const DatasetManifest& m) {
  std::vector<std::pair<Volume, LabelVolume>> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    Volume img = read_volume(e.image);
    LabelVolume lab = read_labels(e.label);
    if (img.dims != lab.dims)
      throw DataError(e.label.string() + ": label dims do not match image " + e.image.string());
    if (m.classes > 0 && lab.classes > m.classes)
      throw DataError(e.label.string() + ": contains label " + std::to_string(lab.classes - 1) +
                      " but run is configured for " + std::to_string(m.classes) + " classes");
    out.emplace_back(std::move(img), std::move(lab));
  }
  return out;
}

DatasetManifest generate_synthetic_dataset(std::uint64_t seed, std::size_t volumes, Dims3 dims,
                                           std::size_t classes,
                                           const std::filesystem::path& out_dir) {
  if (volumes == 0) throw std::invalid_argument("synthetic dataset: need at least 1 volume");
  if (classes < 2) throw std::invalid_argument("synthetic dataset: need at least 2 classes");
  const std::size_t min_dim = std::min({dims[0], dims[1], dims[2]});
  if (min_dim < 4 * classes)
    throw DataError("synthetic dataset: smallest extent " + std::to_string(min_dim) +
                    " cannot fit " + std::to_string(classes) + " nested regions (need >= " +
                    std::to_string(4 * classes) + ")");

  std::filesystem::create_directories(out_dir);
  Rng rng(seed);
  const double sigma = 0.05;  // of the unit dynamic range
  const auto L = static_cast<double>(classes);
  DatasetManifest m;
  m.classes = classes;

  for (std::size_t v = 0; v < volumes; ++v) {
    // one jittered ellipsoid family per volume; shared per-axis scale keeps
    // the regions nested for any class count
    std::array<double, 3> center, inv_r2;
    for (std::size_t a = 0; a < 3; ++a)
      center[a] = 0.5 * static_cast<double>(dims[a]) * (1.0 + rng.uniform(-0.06, 0.06));
    for (std::size_t a = 0; a < 3; ++a) {
      const double r = 0.42 * static_cast<double>(dims[a]) * (1.0 + rng.uniform(-0.05, 0.05));
      inv_r2[a] = 1.0 / (r * r);
    }

    Volume img;
    LabelVolume lab;
    img.dims = lab.dims = dims;
    img.voxels.resize(img.numel());
    lab.labels.resize(lab.numel());
    lab.classes = classes;
    std::vector<std::uint8_t> seen(classes, 0);
    std::size_t i = 0;
    for (std::size_t z = 0; z < dims[0]; ++z)
      for (std::size_t y = 0; y < dims[1]; ++y)
        for (std::size_t x = 0; x < dims[2]; ++x, ++i) {
          const double dz = static_cast<double>(z) - center[0];
          const double dy = static_cast<double>(y) - center[1];
          const double dx = static_cast<double>(x) - center[2];
          const double rr = dz * dz * inv_r2[0] + dy * dy * inv_r2[1] + dx * dx * inv_r2[2];
          // voxel lies inside ellipsoid l iff rr <= 1 - l/L
          long l = static_cast<long>(std::floor(L * (1.0 - rr)));
          l = std::clamp(l, 0L, static_cast<long>(classes) - 1);
          lab.labels[i] = static_cast<std::int32_t>(l);
          seen[static_cast<std::size_t>(l)] = 1;
          const double mean = static_cast<double>(l) / (L - 1.0);
          img.voxels[i] = static_cast<float>(mean + sigma * rng.normal());
        }
    for (std::size_t c = 0; c < classes; ++c)
      if (!seen[c])
        throw DataError("synthetic dataset: class " + std::to_string(c) +
                        " produced no voxels at these dims");

    char name[32];
    std::snprintf(name, sizeof(name), "vol_%03zu.mvol", v);
    const std::filesystem::path ip = out_dir / name;
    std::snprintf(name, sizeof(name), "lab_%03zu.mvol", v);
    const std::filesystem::path lp = out_dir / name;
    img.id = ip.stem().string();
    lab.id = lp.stem().string();
    write_volume(img, ip);
    write_labels(lab, lp);
    m.entries.push_back({ip, lp});
  }

  DatasetManifest relative = m;
  for (auto& e : relative.entries) {
    e.image = e.image.filename();
    e.label = e.label.filename();
  }
  save_manifest(relative, out_dir / "manifest.tsv");
  return m;
}

ClassWeights compute_class_weights(const std::vector<LabelVolume>& vols, std::size_t classes) {
  if (vols.empty()) throw std::invalid_argument("class weights: no label volumes");
  std::vector<std::uint64_t> counts(classes, 0);
  for (const auto& v : vols)
    for (std::int32_t l : v.labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= classes)
        throw DataError("class weights: volume " + v.id + " contains label " + std::to_string(l) +
                        " outside [0," + std::to_string(classes) + ")");
      ++counts[static_cast<std::size_t>(l)];
    }
  return weights_from_counts(counts);
}

}  // namespace ffce
