#include "tap/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "tap/codec.hpp"

namespace tap {

RgbImage decode_png(std::string_view bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error("malformed_image", std::string("cannot decode PNG: ") + image.message, "image");
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error("malformed_image", std::string("cannot decode PNG: ") + image.message, "image");
  }
  return out;
}

std::string encode_png(const RgbImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw Error("encode_failed", std::string("cannot encode PNG: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw Error("encode_failed", std::string("cannot encode PNG: ") + image.message);
  }
  out.resize(size);
  return out;
}

RgbImage load_png(const std::string& path) { return decode_png(codec::read_file(path)); }

void save_png(const std::string& path, const RgbImage& image) {
  codec::write_file_atomic(path, encode_png(image));
}

ImageSize probe_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw Error("file_not_found", "cannot open " + path, "path");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_stdio(&image, file.get())) {
    throw Error("malformed_image", "cannot read PNG header of " + path, "path");
  }
  ImageSize size{static_cast<int>(image.width), static_cast<int>(image.height)};
  png_image_free(&image);
  return size;
}

RgbImage crop(const RgbImage& image, const BoundingBox& box) {
  require_valid_bbox(box, image.width, image.height);
  RgbImage out(box.width(), box.height());
  for (int y = 0; y < box.height(); ++y) {
    std::copy_n(image.at(box.x_min, box.y_min + y), static_cast<std::size_t>(box.width()) * 3,
                out.at(0, y));
  }
  return out;
}

namespace {

// Source intervals and weights covering each output coordinate.
struct Footprint {
  int begin = 0;
  std::vector<double> weights;
};

std::vector<Footprint> footprints(int source, int target) {
  std::vector<Footprint> out(static_cast<std::size_t>(target));
  const double ratio = static_cast<double>(source) / target;
  for (int t = 0; t < target; ++t) {
    const double lo = t * ratio;
    const double hi = (t + 1) * ratio;
    Footprint& f = out[static_cast<std::size_t>(t)];
    f.begin = static_cast<int>(std::floor(lo));
    const int end = std::min(source, static_cast<int>(std::ceil(hi)));
    double total = 0.0;
    for (int s = f.begin; s < end; ++s) {
      const double w = std::min<double>(hi, s + 1) - std::max<double>(lo, s);
      f.weights.push_back(std::max(0.0, w));
      total += f.weights.back();
    }
    for (double& w : f.weights) w /= total;
  }
  return out;
}

}  // namespace

std::vector<float> resample_area(const RgbImage& image, int out_width, int out_height) {
  if (image.empty() || out_width <= 0 || out_height <= 0) {
    throw Error("invalid_size", "resample_area needs non-empty source and target");
  }
  const auto xs = footprints(image.width, out_width);
  const auto ys = footprints(image.height, out_height);
  std::vector<float> out(static_cast<std::size_t>(out_width) * out_height * 3);
#pragma omp parallel for schedule(static)
  for (int oy = 0; oy < out_height; ++oy) {
    const Footprint& fy = ys[static_cast<std::size_t>(oy)];
    for (int ox = 0; ox < out_width; ++ox) {
      const Footprint& fx = xs[static_cast<std::size_t>(ox)];
      double acc[3] = {0.0, 0.0, 0.0};
      for (std::size_t j = 0; j < fy.weights.size(); ++j) {
        const int sy = fy.begin + static_cast<int>(j);
        for (std::size_t i = 0; i < fx.weights.size(); ++i) {
          const double w = fy.weights[j] * fx.weights[i];
          const std::uint8_t* p = image.at(fx.begin + static_cast<int>(i), sy);
          acc[0] += w * p[0];
          acc[1] += w * p[1];
          acc[2] += w * p[2];
        }
      }
      float* o = out.data() + (static_cast<std::size_t>(oy) * out_width + ox) * 3;
      for (int c = 0; c < 3; ++c) o[c] = static_cast<float>(acc[c] / 255.0);
    }
  }
  return out;
}

}  // namespace tap
