#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "eac/common.hpp"
#include "eac/data.hpp"
#include "eac/rng.hpp"
#include "eac/tensor.hpp"

namespace eac {

/// Procedural 10-class dataset for desk-scale experiments. Every class is
/// closed under horizontal mirroring (stripes stay stripes, a disk stays a
/// disk), so the flip-consistency premise holds by construction. Colors are
/// drawn independently of the class; figure opacity, figure/ground contrast,
/// pixel-noise amplitude and center jitter all vary per instance, so examples
/// range from obvious to genuinely hard, and random distractor dots give the
/// network instance-specific detail to latch onto.
struct SynthSpec {
  std::size_t count = 0;
  int classes = 10;
  int height = 32, width = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2 || classes > 10)
      throw ConfigError(msg("synthetic dataset supports 2..10 classes, got ", classes));
    if (height < 16 || width < 16)
      throw ConfigError(msg("synthetic images must be at least 16x16, got ", height,
                            "x", width));
  }
};

namespace detail {

struct SynthColors {
  double bg[3], fg[3];
};

inline SynthColors synth_colors(Rng& rng, double contrast_min, double contrast_max) {
  SynthColors c;
  for (int i = 0; i < 3; ++i) c.bg[i] = rng.uniform(0.05, 0.95);
  // figure/ground contrast banded per instance
  double dist = 0.0;
  do {
    dist = 0.0;
    for (int i = 0; i < 3; ++i) {
      c.fg[i] = rng.uniform(0.05, 0.95);
      dist += std::fabs(c.fg[i] - c.bg[i]);
    }
  } while (dist < contrast_min || dist > contrast_max);
  return c;
}

} // namespace detail

/// Renders one sample. Pure function of (spec.seed, id, label).
template <typename T>
Tensor<T> synth_image(const SynthSpec& spec, std::size_t id, int label) {
  const int height = spec.height, width = spec.width;
  Rng rng(derive_seed(spec.seed, 0x5f17, id));
  // bimodal difficulty: most instances are crisp, a tough minority hides a
  // faint low-opacity figure under heavy noise near the class boundary
  const bool tough = rng.uniform(0.0, 1.0) < 0.12;
  detail::SynthColors colors = tough ? detail::synth_colors(rng, 0.35, 0.6)
                                     : detail::synth_colors(rng, 1.0, 1.8);
  const double blend = tough ? rng.uniform(0.45, 0.62) : rng.uniform(0.95, 1.0);
  const double noise_amp = tough ? rng.uniform(0.13, 0.2) : rng.uniform(0.03, 0.07);
  const double cy = height / 2.0 + rng.uniform(-0.12, 0.12) * height;
  const double cx = width / 2.0 + rng.uniform(-0.12, 0.12) * width;
  // per-class shape parameters
  const int period = 4 + static_cast<int>(rng.below(5)); // stripes / checker cell
  const int phase = static_cast<int>(rng.below(std::uint64_t(period)));
  const double radius = rng.uniform(0.22, 0.38) * std::min(height, width);
  const double thickness = rng.uniform(1.5, 3.5);
  const int diag_sign = rng.below(2) == 0 ? 1 : -1;
  const int spacing = 5 + static_cast<int>(rng.below(4));
  const double dot_r = rng.uniform(1.0, 1.9);
  const int arm = 2 + static_cast<int>(rng.below(3));
  std::vector<double> blob_y, blob_x, blob_r;
  const int blobs = 4 + static_cast<int>(rng.below(4));
  for (int b = 0; b < blobs; ++b) {
    blob_y.push_back(rng.uniform(4.0, height - 4.0));
    blob_x.push_back(rng.uniform(4.0, width - 4.0));
    blob_r.push_back(rng.uniform(2.0, 4.5));
  }
  const double frame_half_h = rng.uniform(0.28, 0.42) * height;
  const double frame_half_w = rng.uniform(0.28, 0.42) * width;

  auto figure = [&](int y, int x) -> bool {
    const double dy = y - cy, dx = x - cx;
    const double r = std::sqrt(dy * dy + dx * dx);
    switch (label) {
      case 0: return ((y + phase) / period) % 2 == 0;               // horizontal stripes
      case 1: return ((x + phase) / period) % 2 == 0;               // vertical stripes
      case 2: return (((y + phase) / period) + ((x + phase) / period)) % 2 == 0; // checker
      case 3: return r < radius;                                    // disk
      case 4: return std::fabs(r - radius) < thickness;             // ring
      case 5: // rectangle frame
        return (std::fabs(dy) < frame_half_h && std::fabs(dx) < frame_half_w) &&
               !(std::fabs(dy) < frame_half_h - thickness &&
                 std::fabs(dx) < frame_half_w - thickness);
      case 6: return std::fabs(dy) < arm || std::fabs(dx) < arm;    // plus
      case 7: { // diagonal stripes, either chirality
        const int q = y + diag_sign * x + phase + 4 * (height + width);
        return (q / period) % 2 == 0;
      }
      case 8: { // dot grid
        const int gy = (y + phase) % spacing - spacing / 2;
        const int gx = (x + phase) % spacing - spacing / 2;
        return gy * gy + gx * gx < dot_r * dot_r;
      }
      case 9: { // blobs
        for (std::size_t b = 0; b < blob_y.size(); ++b) {
          const double by = y - blob_y[b], bx = x - blob_x[b];
          if (by * by + bx * bx < blob_r[b] * blob_r[b]) return true;
        }
        return false;
      }
      default:
        throw ContractError(msg("synth_image: bad label ", label));
    }
  };

  Tensor<T> img({3, std::size_t(height), std::size_t(width)});
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double a = figure(y, x) ? blend : 0.0;
      for (int c = 0; c < 3; ++c)
        img(std::size_t(c), std::size_t(y), std::size_t(x)) =
            static_cast<T>(colors.bg[c] + a * (colors.fg[c] - colors.bg[c]));
    }
  // instance-specific distractor dots
  const int distractors = 3 + static_cast<int>(rng.below(4));
  for (int d = 0; d < distractors; ++d) {
    const double dy = rng.uniform(2.0, height - 2.0);
    const double dx = rng.uniform(2.0, width - 2.0);
    const double dr = rng.uniform(1.0, 3.0);
    double col[3];
    for (int c = 0; c < 3; ++c) col[c] = rng.uniform(0.0, 1.0);
    for (int y = std::max(0, int(dy - dr - 1)); y <= std::min(height - 1, int(dy + dr + 1)); ++y)
      for (int x = std::max(0, int(dx - dr - 1)); x <= std::min(width - 1, int(dx + dr + 1)); ++x)
        if ((y - dy) * (y - dy) + (x - dx) * (x - dx) < dr * dr)
          for (int c = 0; c < 3; ++c)
            img(std::size_t(c), std::size_t(y), std::size_t(x)) = static_cast<T>(col[c]);
  }
  // pixel noise, then quantize onto the byte grid so in-memory data equals
  // what a round trip through the binary format produces
  for (std::size_t i = 0; i < img.numel(); ++i) {
    double v = static_cast<double>(img.flat(i)) + rng.uniform(-noise_amp, noise_amp);
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    img.flat(i) = static_cast<T>(std::nearbyint(v * 255.0) / 255.0);
  }
  return img;
}

/// Balanced dataset: sample i gets label i mod classes, then the whole list
/// is deterministically shuffled so file order carries no label signal.
template <typename T>
Dataset<T> make_synthetic_dataset(const SynthSpec& spec) {
  spec.validate();
  Dataset<T> ds;
  ds.classes = spec.classes;
  ds.channels = 3;
  ds.height = spec.height;
  ds.width = spec.width;
  std::vector<int> labels(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i)
    labels[i] = static_cast<int>(i % std::size_t(spec.classes));
  Rng order_rng(derive_seed(spec.seed, 0x0d5e));
  order_rng.shuffle(labels);
  for (std::size_t i = 0; i < spec.count; ++i) {
    LabeledImage<T> s;
    s.id = i;
    s.true_label = s.given_label = labels[i];
    s.pixels = synth_image<T>(spec, i, labels[i]);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Writes CIFAR-format binary records (1 label byte + 3 32x32 planes).
template <typename T>
void write_cifar_binary(const std::filesystem::path& path, const Dataset<T>& ds) {
  if (ds.channels != 3 || ds.height != 32 || ds.width != 32)
    throw ConfigError("cifar binary writer needs 3x32x32 images");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(msg("cannot write '", path.string(), "'"));
  std::vector<unsigned char> record(1 + 3 * 32 * 32);
  for (const auto& s : ds.samples) {
    record[0] = static_cast<unsigned char>(s.given_label);
    for (std::size_t i = 0; i < s.pixels.numel(); ++i) {
      double v = static_cast<double>(s.pixels.flat(i));
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      record[1 + i] = static_cast<unsigned char>(v * 255.0 + 0.5);
    }
    out.write(reinterpret_cast<const char*>(record.data()),
              static_cast<std::streamsize>(record.size()));
  }
  if (!out.flush()) throw IoError(msg("short write to '", path.string(), "'"));
}

} // namespace eac
