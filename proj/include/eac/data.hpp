#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eac/common.hpp"
#include "eac/image_io.hpp"
#include "eac/rng.hpp"
#include "eac/tensor.hpp"

namespace eac {

template <typename T>
struct LabeledImage {
  std::size_t id = 0;
  Tensor<T> pixels; // C x H x W, values in [0,1]
  int given_label = 0;
  int true_label = 0;
  bool is_noisy = false; // given_label != true_label
};

template <typename T>
struct Dataset {
  std::vector<LabeledImage<T>> samples;
  std::vector<std::string> class_names; // empty unless loaded from an image tree
  int classes = 0;
  int channels = 0, height = 0, width = 0;

  std::size_t size() const { return samples.size(); }
};

enum class DatasetFormat { image_tree, cifar_binary };

inline const char* to_string(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::image_tree: return "image_tree";
    case DatasetFormat::cifar_binary: return "cifar_binary";
  }
  throw ContractError("bad DatasetFormat");
}

inline DatasetFormat parse_dataset_format(const std::string& s) {
  if (s == "image_tree") return DatasetFormat::image_tree;
  if (s == "cifar_binary") return DatasetFormat::cifar_binary;
  throw ConfigError(msg("unknown dataset format '", s, "' (want image_tree or cifar_binary)"));
}

namespace detail {

inline void fnv1a(std::uint64_t& h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

inline std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir,
                                                          bool dirs_only) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory() == dirs_only) out.push_back(e.path());
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
  return out;
}

} // namespace detail

/// Identity of the clean dataset: order, ids, true labels, and pixel bytes.
/// Given labels are deliberately excluded so a manifest can be validated
/// against the dataset it was generated from.
template <typename T>
std::uint64_t dataset_checksum(const Dataset<T>& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const std::int32_t dims[4] = {ds.classes, ds.channels, ds.height, ds.width};
  detail::fnv1a(h, dims, sizeof(dims));
  for (const auto& s : ds.samples) {
    const std::uint64_t id = s.id;
    const std::int32_t label = s.true_label;
    detail::fnv1a(h, &id, sizeof(id));
    detail::fnv1a(h, &label, sizeof(label));
    for (std::size_t i = 0; i < s.pixels.numel(); ++i) {
      double v = static_cast<double>(s.pixels.flat(i));
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      const unsigned char q = static_cast<unsigned char>(v * 255.0 + 0.5);
      detail::fnv1a(h, &q, 1);
    }
  }
  return h;
}

/// Loads a class-per-subdirectory PNG tree. Classes are the subdirectory
/// names in lexicographic order; files are visited in sorted order within
/// each class.
template <typename T>
Dataset<T> load_image_tree(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root))
    throw IoError(msg("dataset root '", root.string(), "' is not a directory"));
  Dataset<T> ds;
  ds.channels = 3;
  const auto class_dirs = detail::sorted_entries(root, true);
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (!e.is_directory())
      throw DataError(msg("unexpected non-directory entry '", e.path().string(),
                          "' in dataset root"));
  ds.classes = static_cast<int>(class_dirs.size());
  std::size_t next_id = 0;
  for (int label = 0; label < ds.classes; ++label) {
    ds.class_names.push_back(class_dirs[label].filename().string());
    for (const auto& file : detail::sorted_entries(class_dirs[label], false)) {
      ImageU8 img = read_png_rgb(file);
      if (ds.height == 0) {
        ds.height = img.height;
        ds.width = img.width;
      } else if (img.height != ds.height || img.width != ds.width) {
        throw DataError(msg("image '", file.string(), "' is ", img.width, "x", img.height,
                            ", expected ", ds.width, "x", ds.height));
      }
      LabeledImage<T> s;
      s.id = next_id++;
      s.pixels = to_tensor_chw<T>(img);
      s.true_label = s.given_label = label;
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

/// Loads CIFAR-style binary batches: per record, 1 label byte then 3072
/// pixel bytes as three 32x32 planes (R, G, B). `path` may be one .bin file
/// or a directory of them (read in sorted order).
template <typename T>
Dataset<T> load_cifar_binary(const std::filesystem::path& path, int classes) {
  if (classes < 1) throw ConfigError("cifar loader needs a positive class count");
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& f : detail::sorted_entries(path, false))
      if (f.extension() == ".bin") files.push_back(f);
    if (files.empty())
      throw IoError(msg("no .bin files under '", path.string(), "'"));
  } else {
    files.push_back(path);
  }
  constexpr int kH = 32, kW = 32, kC = 3;
  constexpr std::size_t kRecord = 1 + std::size_t(kC) * kH * kW;
  Dataset<T> ds;
  ds.classes = classes;
  ds.channels = kC;
  ds.height = kH;
  ds.width = kW;
  std::size_t next_id = 0;
  std::vector<unsigned char> record(kRecord);
  for (const auto& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError(msg("cannot open '", file.string(), "'"));
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::uint64_t>(in.tellg());
    if (bytes % kRecord != 0)
      throw DataError(msg("'", file.string(), "' is ", bytes,
                          " bytes, not a multiple of the ", kRecord, "-byte record"));
    in.seekg(0);
    const std::size_t count = bytes / kRecord;
    for (std::size_t rec = 0; rec < count; ++rec) {
      in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(kRecord));
      if (!in) throw IoError(msg("short read in '", file.string(), "'"));
      const int label = record[0];
      if (label >= classes)
        throw DataError(msg("record ", rec, " of '", file.string(), "' has label ",
                            label, " >= ", classes));
      LabeledImage<T> s;
      s.id = next_id++;
      s.true_label = s.given_label = label;
      s.pixels = Tensor<T>({kC, kH, kW});
      for (std::size_t i = 0; i < std::size_t(kC) * kH * kW; ++i)
        s.pixels.flat(i) = static_cast<T>(record[1 + i]) / static_cast<T>(255);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

/// subset > 0 keeps the first `subset` samples of the deterministic order.
template <typename T>
Dataset<T> load_dataset(const std::filesystem::path& path, DatasetFormat format,
                        int classes = 0, std::size_t subset = 0) {
  Dataset<T> ds = format == DatasetFormat::image_tree
                      ? load_image_tree<T>(path)
                      : load_cifar_binary<T>(path, classes);
  if (format == DatasetFormat::image_tree && classes > 0 && ds.classes != classes)
    throw DataError(msg("dataset '", path.string(), "' has ", ds.classes,
                        " classes, config says ", classes));
  if (subset > 0 && subset < ds.samples.size()) ds.samples.resize(subset);
  return ds;
}

struct NoiseSpec {
  double rate = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const NoiseSpec&) const = default;

  void validate() const {
    if (!(rate >= 0.0 && rate <= 1.0))
      throw ConfigError(msg("noise rate ", rate, " outside [0,1]"));
  }
};

struct NoiseRow {
  std::size_t id;
  int true_label;
  int given_label;
};

struct NoiseManifest {
  std::vector<NoiseRow> rows; // corrupted samples only, ascending id
  NoiseSpec spec;
  int classes = 0;
  std::size_t total = 0;      // training-set size the manifest was drawn from
  std::uint64_t checksum = 0; // dataset_checksum of the clean dataset

  friend bool operator==(const NoiseManifest& a, const NoiseManifest& b) {
    if (a.rows.size() != b.rows.size() || a.spec.rate != b.spec.rate ||
        a.spec.seed != b.spec.seed || a.classes != b.classes || a.total != b.total ||
        a.checksum != b.checksum)
      return false;
    for (std::size_t i = 0; i < a.rows.size(); ++i)
      if (a.rows[i].id != b.rows[i].id || a.rows[i].true_label != b.rows[i].true_label ||
          a.rows[i].given_label != b.rows[i].given_label)
        return false;
    return true;
  }
};

/// Symmetric label noise: exactly round-half-even(rate*N) samples drawn
/// uniformly without replacement get their given label resampled uniformly
/// over the other classes. Pure function of (dataset, spec).
template <typename T>
NoiseManifest inject_noise(Dataset<T>& ds, const NoiseSpec& spec) {
  spec.validate();
  const std::size_t n = ds.samples.size();
  NoiseManifest manifest;
  manifest.spec = spec;
  manifest.classes = ds.classes;
  manifest.total = n;
  manifest.checksum = dataset_checksum(ds);
  const auto k = static_cast<std::size_t>(std::nearbyint(spec.rate * static_cast<double>(n)));
  if (k == 0) return manifest;
  if (ds.classes < 2)
    throw ConfigError(msg("cannot inject noise with ", ds.classes, " classes"));
  Rng rng(derive_seed(spec.seed, 0x6015e));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + k);
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t idx : chosen) {
    LabeledImage<T>& s = ds.samples[idx];
    const int offset = static_cast<int>(rng.below(static_cast<std::uint64_t>(ds.classes - 1)));
    const int label = offset >= s.true_label ? offset + 1 : offset;
    s.given_label = label;
    s.is_noisy = true;
    manifest.rows.push_back({s.id, s.true_label, s.given_label});
  }
  return manifest;
}

inline void save_manifest(const std::filesystem::path& path, const NoiseManifest& m) {
  char rate_buf[64];
  const auto conv = std::to_chars(rate_buf, rate_buf + sizeof(rate_buf), m.spec.rate);
  std::ostringstream out;
  out << "# spec: scheme=symmetric rate=" << std::string_view(rate_buf, conv.ptr - rate_buf)
      << " seed=" << m.spec.seed
      << " classes=" << m.classes << " total=" << m.total << " flipped=" << m.rows.size()
      << " checksum=" << std::hex << m.checksum << std::dec << "\n";
  out << "id,true_label,given_label\n";
  for (const auto& r : m.rows)
    out << r.id << "," << r.true_label << "," << r.given_label << "\n";
  std::ofstream f(path);
  if (!f) throw IoError(msg("cannot write manifest '", path.string(), "'"));
  f << out.str();
  if (!f.flush()) throw IoError(msg("short write to manifest '", path.string(), "'"));
}

inline NoiseManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(msg("cannot open manifest '", path.string(), "'"));
  NoiseManifest m;
  std::string line;
  if (!std::getline(f, line) || line.rfind("# spec:", 0) != 0)
    throw DataError(msg("manifest '", path.string(), "' lacks the '# spec:' line"));
  std::istringstream spec_in(line.substr(7));
  std::string token;
  std::size_t flipped = 0;
  bool saw_checksum = false;
  while (spec_in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos)
      throw DataError(msg("bad manifest spec token '", token, "'"));
    const std::string key = token.substr(0, eq);
    const std::string val = token.substr(eq + 1);
    try {
      if (key == "scheme") {
        if (val != "symmetric") throw DataError(msg("unknown noise scheme '", val, "'"));
      } else if (key == "rate") m.spec.rate = std::stod(val);
      else if (key == "seed") m.spec.seed = std::stoull(val);
      else if (key == "classes") m.classes = std::stoi(val);
      else if (key == "total") m.total = std::stoull(val);
      else if (key == "flipped") flipped = std::stoull(val);
      else if (key == "checksum") { m.checksum = std::stoull(val, nullptr, 16); saw_checksum = true; }
      else throw DataError(msg("unknown manifest spec key '", key, "'"));
    } catch (const std::invalid_argument&) {
      throw DataError(msg("bad manifest spec value in '", token, "'"));
    }
  }
  if (!saw_checksum) throw DataError("manifest spec line lacks checksum");
  if (!std::getline(f, line) || line != "id,true_label,given_label")
    throw DataError(msg("manifest '", path.string(), "' has a bad csv header"));
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    NoiseRow r;
    char c1, c2;
    std::istringstream row(line);
    if (!(row >> r.id >> c1 >> r.true_label >> c2 >> r.given_label) || c1 != ',' || c2 != ',')
      throw DataError(msg("bad manifest row '", line, "'"));
    m.rows.push_back(r);
  }
  if (m.rows.size() != flipped)
    throw DataError(msg("manifest declares ", flipped, " flipped rows but carries ",
                        m.rows.size()));
  return m;
}

/// Re-applies a manifest onto a freshly loaded (clean) dataset, refusing to
/// touch a dataset the manifest was not generated from.
template <typename T>
void apply_manifest(Dataset<T>& ds, const NoiseManifest& m) {
  const std::uint64_t have = dataset_checksum(ds);
  if (have != m.checksum) {
    std::ostringstream hex;
    hex << std::hex << have << " vs manifest " << m.checksum;
    throw DataError(msg("dataset checksum mismatch: ", hex.str()));
  }
  if (ds.samples.size() != m.total)
    throw DataError(msg("manifest covers ", m.total, " samples, dataset has ",
                        ds.samples.size()));
  for (const auto& r : m.rows) {
    if (r.id >= ds.samples.size())
      throw DataError(msg("manifest row id ", r.id, " out of range"));
    LabeledImage<T>& s = ds.samples[r.id];
    if (s.id != r.id || s.true_label != r.true_label)
      throw DataError(msg("manifest row id ", r.id, " does not match the dataset"));
    s.given_label = r.given_label;
    s.is_noisy = s.given_label != s.true_label;
  }
}

struct EraseSpec {
  double probability = 1.0;
  double area_min = 0.02, area_max = 0.33;
  double aspect_min = 0.3, aspect_max = 3.3;
  double fill = 0.0;

  void validate() const {
    if (!(probability >= 0.0 && probability <= 1.0))
      throw ConfigError(msg("erase probability ", probability, " outside [0,1]"));
    if (!(area_min > 0.0 && area_min <= area_max && area_max < 1.0))
      throw ConfigError(msg("erase area range [", area_min, ",", area_max, "] invalid"));
    if (!(aspect_min > 0.0 && aspect_min <= aspect_max))
      throw ConfigError(msg("erase aspect range [", aspect_min, ",", aspect_max, "] invalid"));
  }

  friend bool operator==(const EraseSpec&, const EraseSpec&) = default;
};

/// Random erasing: fills one axis-aligned rectangle whose exact area
/// fraction lies in [area_min, area_max] and whose aspect ratio is sampled
/// log-uniformly. A sampled rectangle that does not fit (or whose rounded
/// area leaves the range) is retried; after 100 attempts the image is
/// returned unchanged.
template <typename T>
void random_erase_inplace(Tensor<T>& chw, const EraseSpec& spec, Rng& rng) {
  spec.validate();
  if (chw.ndim() != 3) throw ContractError("random_erase: want a CxHxW tensor");
  if (rng.uniform() >= spec.probability) return;
  const int channels = static_cast<int>(chw.size(0));
  const int height = static_cast<int>(chw.size(1));
  const int width = static_cast<int>(chw.size(2));
  const double hw = static_cast<double>(height) * width;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double area = rng.uniform(spec.area_min, spec.area_max) * hw;
    const double aspect = std::exp(rng.uniform(std::log(spec.aspect_min), std::log(spec.aspect_max)));
    const int rect_h = static_cast<int>(std::lround(std::sqrt(area * aspect)));
    const int rect_w = static_cast<int>(std::lround(std::sqrt(area / aspect)));
    if (rect_h < 1 || rect_w < 1 || rect_h >= height || rect_w >= width) continue;
    const double frac = static_cast<double>(rect_h) * rect_w / hw;
    if (frac < spec.area_min || frac > spec.area_max) continue;
    const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - rect_h + 1)));
    const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - rect_w + 1)));
    for (int c = 0; c < channels; ++c)
      for (int y = top; y < top + rect_h; ++y) {
        T* row = chw.data() + (std::size_t(c) * height + y) * width + left;
        std::fill(row, row + rect_w, static_cast<T>(spec.fill));
      }
    return;
  }
}

template <typename T>
Tensor<T> random_erase(const Tensor<T>& chw, const EraseSpec& spec, Rng& rng) {
  Tensor<T> out = chw;
  random_erase_inplace(out, spec, rng);
  return out;
}

/// Mirrors the width axis of an image, a feature map, or an attention map.
template <typename T>
Tensor<T> horizontal_flip(const Tensor<T>& t) {
  return flip_last_axis(t);
}

/// Seeded per-epoch shuffle partitioned into batches; the final partial
/// batch is kept.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n,
                                                          std::size_t batch_size,
                                                          std::uint64_t seed,
                                                          std::uint64_t epoch) {
  if (n == 0) throw ConfigError("make_batches: empty dataset");
  if (batch_size < 1) throw ConfigError("make_batches: batch size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0xba7c4, epoch));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + stop);
  }
  return batches;
}

} // namespace eac
