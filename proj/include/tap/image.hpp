#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tap/common.hpp"

namespace tap {

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  bool empty() const { return width == 0 || height == 0; }
  std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

struct ImageSize {
  int width = 0;
  int height = 0;
};

RgbImage decode_png(std::string_view bytes);
std::string encode_png(const RgbImage& image);
RgbImage load_png(const std::string& path);
void save_png(const std::string& path, const RgbImage& image);
// Reads only the PNG header.
ImageSize probe_png(const std::string& path);

RgbImage crop(const RgbImage& image, const BoundingBox& box);

// Area-weighted resampling of an RGB image to out_width x out_height,
// producing interleaved RGB floats scaled to [0, 1]. Each output pixel is
// the exact coverage-weighted mean of the source pixels under its footprint.
std::vector<float> resample_area(const RgbImage& image, int out_width, int out_height);

}  // namespace tap
