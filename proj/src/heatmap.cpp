#include <algorithm>
#include <cmath>

#include "tap/attribution.hpp"

namespace tap::attr {

std::array<std::uint8_t, 3> diverging_color(double v) {
  v = std::clamp(std::isfinite(v) ? v : 0.5, 0.0, 1.0);
  const auto channel = [](double t) { return static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0)); };
  if (v < 0.5) {
    const std::uint8_t c = channel(2.0 * v);
    return {c, c, 255};
  }
  const std::uint8_t c = channel(2.0 - 2.0 * v);
  return {255, c, c};
}

std::array<std::uint8_t, 3> map_color(Colormap map, double v) {
  if (map == Colormap::kBlueWhiteRed) return diverging_color(v);
  v = std::clamp(std::isfinite(v) ? v : 0.5, 0.0, 1.0);
  const auto c = static_cast<std::uint8_t>(std::lround(v * 255.0));
  return {c, c, c};
}

Colormap colormap_named(const std::string& name) {
  if (name == "blue_white_red") return Colormap::kBlueWhiteRed;
  if (name == "gray") return Colormap::kGray;
  throw Error("invalid_colormap", "unknown colormap " + name + " (blue_white_red, gray)", "colormap");
}

Heatmap render_heatmap(const RegionAttribution& ranked, const model::LetterboxedScreen& base, Colormap map) {
  if (ranked.height != model::kInputHeight || ranked.width != model::kInputWidth) {
    throw Error("shape_mismatch", "region attribution must be at model resolution");
  }
  const BoundingBox content = base.transform.content_box();
  const auto saliency = region_saliency(ranked);

  double lo = INFINITY, hi = -INFINITY;
  for (int y = content.y_min; y < content.y_max; ++y) {
    for (int x = content.x_min; x < content.x_max; ++x) {
      const double s = saliency[static_cast<std::size_t>(y) * ranked.width + x];
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
  }
  const bool flat = !(hi > lo);

  Heatmap out{RgbImage(content.width(), content.height()), RgbImage(content.width(), content.height())};
#pragma omp parallel for schedule(static)
  for (int y = content.y_min; y < content.y_max; ++y) {
    for (int x = content.x_min; x < content.x_max; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * ranked.width + x;
      const double v = flat ? 0.5 : (saliency[p] - lo) / (hi - lo);
      const auto color = map_color(map, v);
      std::uint8_t* o = out.overlay.at(x - content.x_min, y - content.y_min);
      std::uint8_t* f = out.filtered.at(x - content.x_min, y - content.y_min);
      const double gain = flat ? 1.0 : v;
      for (int c = 0; c < 3; ++c) {
        o[c] = color[static_cast<std::size_t>(c)];
        const double px = std::clamp(static_cast<double>(base.rgb[p * 3 + static_cast<std::size_t>(c)]), 0.0, 1.0);
        f[c] = static_cast<std::uint8_t>(std::lround(px * gain * 255.0));
      }
    }
  }
  return out;
}

}  // namespace tap::attr
