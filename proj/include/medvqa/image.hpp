#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace medvqa {

// RGB raster, row-major HWC, values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f);

  static constexpr int channels = 3;

  float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }

  size_t pixel_count() const { return static_cast<size_t>(height) * width; }
  bool empty() const { return pixels.empty(); }

  // Throws ShapeError when dimensions are non-positive or any value is
  // outside [0,1] or non-finite.
  void validate() const;

  bool operator==(const Image&) const = default;
};

Image load_image(const std::filesystem::path& path);
Image decode_image(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const Image& image);
void save_png(const Image& image, const std::filesystem::path& path);

// Bilinear resampling (area averaging when shrinking).
Image resize_image(const Image& image, int height, int width);

// Mean RGB value over a set of images.
std::vector<float> mean_pixel(std::span<const Image* const> images);

}  // namespace medvqa
