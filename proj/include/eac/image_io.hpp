#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "eac/common.hpp"
#include "eac/tensor.hpp"

namespace eac {

/// Interleaved 8-bit RGB image.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels; // height * width * 3, row-major RGB

  std::uint8_t& at(int y, int x, int c) { return pixels[(std::size_t(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return pixels[(std::size_t(y) * width + x) * 3 + c]; }
};

inline ImageU8 read_png_rgb(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    throw IoError(msg("png read '", path.string(), "': ", png.message));
  png.format = PNG_FORMAT_RGB;
  ImageU8 img;
  img.width = static_cast<int>(png.width);
  img.height = static_cast<int>(png.height);
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IoError(msg("png decode '", path.string(), "': ", png.message));
  }
  return img;
}

inline void write_png_rgb(const std::filesystem::path& path, const ImageU8& img) {
  if (img.width < 1 || img.height < 1 ||
      img.pixels.size() != std::size_t(img.width) * img.height * 3)
    throw ContractError("write_png_rgb: inconsistent image buffer");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, img.pixels.data(), 0, nullptr))
    throw IoError(msg("png write '", path.string(), "': ", png.message));
}

/// CHW float tensor in [0,1] -> interleaved 8-bit RGB with round-to-nearest.
template <typename T>
ImageU8 to_image_u8(const Tensor<T>& chw) {
  if (chw.ndim() != 3 || chw.size(0) != 3)
    throw ConfigError(msg("to_image_u8: want 3xHxW tensor, got rank ", chw.ndim()));
  ImageU8 img;
  img.height = static_cast<int>(chw.size(1));
  img.width = static_cast<int>(chw.size(2));
  img.pixels.resize(std::size_t(img.height) * img.width * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = static_cast<double>(chw(c, y, x));
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        img.at(y, x, c) = static_cast<std::uint8_t>(v * 255.0 + 0.5);
      }
  return img;
}

/// Interleaved 8-bit RGB -> CHW float tensor scaled to [0,1].
template <typename T>
Tensor<T> to_tensor_chw(const ImageU8& img) {
  Tensor<T> chw({3, std::size_t(img.height), std::size_t(img.width)});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        chw(c, y, x) = static_cast<T>(img.at(y, x, c)) / static_cast<T>(255);
  return chw;
}

} // namespace eac
