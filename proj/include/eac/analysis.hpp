#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eac/common.hpp"
#include "eac/data.hpp"
#include "eac/image_io.hpp"
#include "eac/loss.hpp"
#include "eac/model.hpp"
#include "eac/trainer.hpp"

namespace eac {

/// Mean test accuracy over the final k epochs of a run.
inline double final_accuracy(const TrainHistory& history, int k = 5) {
  if (k < 1) throw ConfigError(msg("final_accuracy: k must be >= 1, got ", k));
  if (history.size() < std::size_t(k))
    throw ConfigError(msg("final_accuracy: history has ", history.size(),
                          " epochs, need ", k));
  double sum = 0.0;
  for (std::size_t i = history.size() - std::size_t(k); i < history.size(); ++i) {
    if (std::isnan(history[i].test_accuracy))
      throw ConfigError(msg("final_accuracy: epoch ", history[i].epoch,
                            " has no test accuracy"));
    sum += history[i].test_accuracy;
  }
  return sum / static_cast<double>(k);
}

struct PerSampleRecord {
  std::size_t id = 0;
  double loss = 0.0; // unreduced classification loss against the given label
  bool is_noisy = false;
  int predicted = 0;
  int true_label = 0;
  int given_label = 0;
  double flip_consistency = std::numeric_limits<double>::quiet_NaN();
};

/// Per-sample MSE between an image's attention maps and the mirrored maps
/// of its mirrored image. Diagnostic mode: no erasing.
template <typename T>
std::vector<double> flip_consistency_scores(Model<T>& model, const Tensor<T>& images) {
  BackboneTrace<T> trace;
  const Tensor<T>& feat = model.backbone.forward(images, trace);
  Tensor<T> maps = cam(model.head, feat);
  const Tensor<T> flipped = flip_last_axis(images);
  const Tensor<T>& feat_flip = model.backbone.forward(flipped, trace);
  Tensor<T> maps_flip = cam(model.head, feat_flip);
  const std::size_t n = maps.size(0);
  const std::size_t per = maps.numel() / n;
  const std::size_t width = maps.size(3);
  std::vector<double> scores(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* a = maps.data() + i * per;
    const T* b = maps_flip.data() + i * per;
    double sum = 0.0;
    for (std::size_t r = 0; r < per / width; ++r)
      for (std::size_t w = 0; w < width; ++w) {
        const double d = static_cast<double>(a[r * width + w]) -
                         static_cast<double>(b[r * width + width - 1 - w]);
        sum += d * d;
      }
    scores[i] = sum / static_cast<double>(per);
  }
  return scores;
}

/// Unaugmented sweep over a (typically noised training) dataset producing
/// the Fig.-6-style per-sample diagnostics.
template <typename T>
std::vector<PerSampleRecord> per_sample_records(Model<T>& model, const Dataset<T>& ds,
                                                std::size_t batch_size = 256,
                                                bool with_flip_scores = false) {
  std::vector<PerSampleRecord> records;
  records.reserve(ds.samples.size());
  BackboneTrace<T> trace;
  const auto c = std::size_t(ds.channels), h = std::size_t(ds.height), w = std::size_t(ds.width);
  for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, ds.samples.size() - start);
    Tensor<T> images({n, c, h, w});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = ds.samples[start + i];
      std::copy(s.pixels.data(), s.pixels.data() + s.pixels.numel(),
                images.data() + i * s.pixels.numel());
      labels[i] = s.given_label;
    }
    const Tensor<T>& feat = model.backbone.forward(images, trace);
    auto [pooled, logits] = pool_and_logits(model.head, feat);
    std::vector<double> losses;
    classification_loss(logits, labels, &losses);
    std::vector<double> flips;
    if (with_flip_scores) flips = flip_consistency_scores(model, images);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = ds.samples[start + i];
      PerSampleRecord r;
      r.id = s.id;
      r.loss = losses[i];
      r.is_noisy = s.is_noisy;
      r.true_label = s.true_label;
      r.given_label = s.given_label;
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.size(1); ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      r.predicted = static_cast<int>(best);
      if (with_flip_scores) r.flip_consistency = flips[i];
      records.push_back(r);
    }
  }
  return records;
}

struct GroupStats {
  std::size_t count = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> density; // histogram density, integrates to 1
};

struct SeparationReport {
  bool auroc_defined = false;
  double auroc = std::numeric_limits<double>::quiet_NaN();
  double bin_lo = 0.0, bin_hi = 0.0; // histogram support [0, max loss]
  int bins = 50;
  GroupStats clean, noisy;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<double> density_histogram(const std::vector<double>& values,
                                             double lo, double hi, int bins) {
  std::vector<double> density(bins, 0.0);
  if (values.empty()) return density;
  const double width = (hi - lo) / bins;
  for (double v : values) {
    int b = static_cast<int>((v - lo) / width);
    if (b < 0) b = 0;
    if (b >= bins) b = bins - 1;
    density[std::size_t(b)] += 1.0;
  }
  const double norm = 1.0 / (static_cast<double>(values.size()) * width);
  for (double& d : density) d *= norm;
  return density;
}

} // namespace detail

/// How well per-sample loss ranks noisy above clean: Mann-Whitney AUROC
/// with half credit for ties, plus density histograms over [0, max loss]
/// with 50 bins. AUROC is undefined when either group is empty.
inline SeparationReport loss_separation(const std::vector<PerSampleRecord>& records) {
  SeparationReport report;
  std::vector<double> clean, noisy;
  for (const auto& r : records) (r.is_noisy ? noisy : clean).push_back(r.loss);
  report.clean.count = clean.size();
  report.noisy.count = noisy.size();
  double max_loss = 0.0;
  for (const auto& r : records) max_loss = std::max(max_loss, r.loss);
  report.bin_lo = 0.0;
  report.bin_hi = max_loss > 0.0 ? max_loss : 1.0;
  report.clean.density = detail::density_histogram(clean, report.bin_lo, report.bin_hi,
                                                   report.bins);
  report.noisy.density = detail::density_histogram(noisy, report.bin_lo, report.bin_hi,
                                                   report.bins);
  if (!clean.empty()) {
    report.clean.mean = std::accumulate(clean.begin(), clean.end(), 0.0) / clean.size();
    report.clean.median = detail::median_of(clean);
  }
  if (!noisy.empty()) {
    report.noisy.mean = std::accumulate(noisy.begin(), noisy.end(), 0.0) / noisy.size();
    report.noisy.median = detail::median_of(noisy);
  }
  if (clean.empty() || noisy.empty()) return report; // AUROC undefined

  struct Entry {
    double loss;
    bool noisy;
  };
  std::vector<Entry> all;
  all.reserve(records.size());
  for (double v : clean) all.push_back({v, false});
  for (double v : noisy) all.push_back({v, true});
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
    return a.loss < b.loss;
  });
  // midranks over ties, then the rank-sum (Mann-Whitney U) statistic
  double noisy_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].loss == all[i].loss) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (all[k].noisy) noisy_rank_sum += midrank;
    i = j;
  }
  const double kn = static_cast<double>(noisy.size());
  const double km = static_cast<double>(clean.size());
  report.auroc = (noisy_rank_sum - kn * (kn + 1.0) / 2.0) / (kn * km);
  report.auroc_defined = true;
  return report;
}

inline nlohmann::json to_json(const SeparationReport& r) {
  auto group = [](const GroupStats& g) {
    nlohmann::json j{{"count", g.count}, {"density", g.density}};
    j["mean"] = std::isnan(g.mean) ? nlohmann::json() : nlohmann::json(g.mean);
    j["median"] = std::isnan(g.median) ? nlohmann::json() : nlohmann::json(g.median);
    return j;
  };
  nlohmann::json j{{"bins", r.bins},      {"bin_lo", r.bin_lo}, {"bin_hi", r.bin_hi},
                   {"clean", group(r.clean)}, {"noisy", group(r.noisy)}};
  j["auroc"] = r.auroc_defined ? nlohmann::json(r.auroc) : nlohmann::json();
  return j;
}

inline void save_separation_report(const std::filesystem::path& path,
                                   const SeparationReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(msg("cannot write report '", path.string(), "'"));
  out << to_json(report).dump(2) << "\n";
}

namespace detail {

/// Classic jet ramp: blue -> cyan -> yellow -> red over [0,1].
inline void jet_color(double v, std::uint8_t rgb[3]) {
  v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  auto channel = [](double x) {
    x = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
    return static_cast<std::uint8_t>(x * 255.0 + 0.5);
  };
  rgb[0] = channel(1.5 - std::fabs(4.0 * v - 3.0));
  rgb[1] = channel(1.5 - std::fabs(4.0 * v - 2.0));
  rgb[2] = channel(1.5 - std::fabs(4.0 * v - 1.0));
}

/// Bilinear resize of one HxW map (half-pixel-center convention).
inline std::vector<double> bilinear_upsample(const std::vector<double>& src, int sh, int sw,
                                             int dh, int dw) {
  std::vector<double> dst(std::size_t(dh) * dw);
  const double sy = static_cast<double>(sh) / dh;
  const double sx = static_cast<double>(sw) / dw;
  for (int y = 0; y < dh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::max(0.0, std::min(fy, static_cast<double>(sh - 1)));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::max(0.0, std::min(fx, static_cast<double>(sw - 1)));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double top = src[std::size_t(y0) * sw + x0] * (1.0 - wx) +
                         src[std::size_t(y0) * sw + x1] * wx;
      const double bot = src[std::size_t(y1) * sw + x0] * (1.0 - wx) +
                         src[std::size_t(y1) * sw + x1] * wx;
      dst[std::size_t(y) * dw + x] = top * (1.0 - wy) + bot * wy;
    }
  }
  return dst;
}

} // namespace detail

inline constexpr int kHeatmapPredicted = -1;

/// Renders the chosen class's attention map over the input image:
/// min-max display normalization, bilinear upsample to input resolution,
/// jet colors, 0.5 alpha blend, PNG output. A constant map degenerates to
/// the uniform mid color (warning on stderr).
template <typename T>
void export_cam_heatmap(Model<T>& model, const Tensor<T>& image_chw, int class_id,
                        const std::filesystem::path& path) {
  if (image_chw.ndim() != 3)
    throw ConfigError(msg("export_cam_heatmap: want a CxHxW image, got rank ",
                          image_chw.ndim()));
  const std::size_t c = image_chw.size(0), h = image_chw.size(1), w = image_chw.size(2);
  Tensor<T> batch({1, c, h, w});
  std::copy(image_chw.data(), image_chw.data() + image_chw.numel(), batch.data());
  BackboneTrace<T> trace;
  const Tensor<T>& feat = model.backbone.forward(batch, trace);
  int target = class_id;
  if (target == kHeatmapPredicted) {
    auto [pooled, logits] = pool_and_logits(model.head, feat);
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.size(1); ++j)
      if (logits(0, j) > logits(0, best)) best = j;
    target = static_cast<int>(best);
  }
  if (target < 0 || target >= model.head.classes())
    throw ConfigError(msg("export_cam_heatmap: class ", target, " outside [0,",
                          model.head.classes(), ")"));
  Tensor<T> maps = cam(model.head, feat);
  const int mh = static_cast<int>(maps.size(2)), mw = static_cast<int>(maps.size(3));
  std::vector<double> map(std::size_t(mh) * mw);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int y = 0; y < mh; ++y)
    for (int x = 0; x < mw; ++x) {
      const double v = static_cast<double>(maps(0, std::size_t(target), std::size_t(y),
                                                std::size_t(x)));
      map[std::size_t(y) * mw + x] = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (hi > lo) {
    for (double& v : map) v = (v - lo) / (hi - lo);
  } else {
    std::cerr << "export_cam_heatmap: constant attention map, emitting uniform mid color\n";
    for (double& v : map) v = 0.5;
  }
  const std::vector<double> up =
      detail::bilinear_upsample(map, mh, mw, static_cast<int>(h), static_cast<int>(w));
  ImageU8 out;
  out.height = static_cast<int>(h);
  out.width = static_cast<int>(w);
  out.pixels.resize(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::uint8_t rgb[3];
      detail::jet_color(up[y * w + x], rgb);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double base = c == 3 ? static_cast<double>(image_chw(ch, y, x))
                             : static_cast<double>(image_chw(0, y, x));
        base = base < 0.0 ? 0.0 : (base > 1.0 ? 1.0 : base);
        const double mixed = 0.5 * base * 255.0 + 0.5 * rgb[ch];
        out.pixels[(y * w + x) * 3 + ch] = static_cast<std::uint8_t>(mixed + 0.5);
      }
    }
  write_png_rgb(path, out);
}

/// GAP features for the whole dataset as CSV:
/// id,given_label,true_label,is_noisy,f_0..f_{C-1}.
template <typename T>
void export_features(Model<T>& model, const Dataset<T>& ds,
                     const std::filesystem::path& path, std::size_t batch_size = 256) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(msg("cannot write features '", path.string(), "'"));
  out << "id,given_label,true_label,is_noisy";
  const int channels = model.head.channels();
  for (int i = 0; i < channels; ++i) out << ",f_" << i;
  out << "\n";
  out.precision(9);
  BackboneTrace<T> trace;
  const auto c = std::size_t(ds.channels), h = std::size_t(ds.height), w = std::size_t(ds.width);
  for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, ds.samples.size() - start);
    Tensor<T> images({n, c, h, w});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& pix = ds.samples[start + i].pixels;
      std::copy(pix.data(), pix.data() + pix.numel(), images.data() + i * pix.numel());
    }
    const Tensor<T>& feat = model.backbone.forward(images, trace);
    auto [pooled, logits] = pool_and_logits(model.head, feat);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = ds.samples[start + i];
      out << s.id << "," << s.given_label << "," << s.true_label << ","
          << (s.is_noisy ? 1 : 0);
      for (std::size_t f = 0; f < pooled.size(1); ++f) out << "," << pooled(i, f);
      out << "\n";
    }
  }
  if (!out.flush()) throw IoError(msg("short write to '", path.string(), "'"));
}

} // namespace eac
