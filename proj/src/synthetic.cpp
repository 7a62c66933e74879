#include "tap/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

namespace tap::data {
namespace {

enum class Kind { kButton, kText, kImage };

using Color = std::array<int, 3>;

double luminance(const Color& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

Color random_color(Rng& rng) { return {rng.uniform_int(0, 255), rng.uniform_int(0, 255), rng.uniform_int(0, 255)}; }

Color hsv_color(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 360.0) / 60.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  auto q = [m](double t) { return static_cast<int>(std::lround((t + m) * 255.0)); };
  return {q(r), q(g), q(b)};
}

// Color whose luminance differs from ref by at least min_gap.
Color contrasting(Rng& rng, const Color& ref, double min_gap, bool saturated) {
  for (int tries = 0; tries < 64; ++tries) {
    const Color c = saturated ? hsv_color(rng.uniform(0, 360), rng.uniform(0.5, 1.0), rng.uniform(0.35, 0.95))
                              : random_color(rng);
    if (std::fabs(luminance(c) - luminance(ref)) >= min_gap) return c;
  }
  return luminance(ref) > 128 ? Color{20, 20, 20} : Color{235, 235, 235};
}

void put(RgbImage& img, int x, int y, const Color& c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  std::uint8_t* p = img.at(x, y);
  for (int k = 0; k < 3; ++k) p[k] = static_cast<std::uint8_t>(std::clamp(c[k], 0, 255));
}

void fill_rect(RgbImage& img, int x0, int y0, int x1, int y1, const Color& c) {
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) put(img, x, y, c);
}

void fill_rounded(RgbImage& img, const BoundingBox& b, int radius, const Color& c) {
  radius = std::min({radius, b.width() / 2, b.height() / 2});
  for (int y = b.y_min; y < b.y_max; ++y) {
    for (int x = b.x_min; x < b.x_max; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double cx = std::clamp(px, b.x_min + radius + 0.0, b.x_max - radius + 0.0);
      const double cy = std::clamp(py, b.y_min + radius + 0.0, b.y_max - radius + 0.0);
      if ((px - cx) * (px - cx) + (py - cy) * (py - cy) <= radius * radius) put(img, x, y, c);
    }
  }
}

// Pseudo-glyphs: each cell gets a few random strokes, words separated by
// blank cells. Returns the rendered width.
int draw_text(RgbImage& img, int x0, int y0, int max_width, int glyph_h, const Color& c, Rng& rng) {
  const int gw = std::max(3, glyph_h * 3 / 5);
  const int gap = std::max(1, glyph_h / 6);
  const int t = std::max(1, glyph_h / 7);
  int x = x0;
  int word = rng.uniform_int(2, 7);
  while (x + gw <= x0 + max_width) {
    if (word == 0) {
      x += gw / 2 + gap;
      word = rng.uniform_int(2, 7);
      continue;
    }
    const int strokes = rng.uniform_int(2, 4);
    for (int s = 0; s < strokes; ++s) {
      switch (rng.uniform_int(0, 4)) {
        case 0: fill_rect(img, x, y0, x + t, y0 + glyph_h, c); break;
        case 1: fill_rect(img, x + gw - t, y0, x + gw, y0 + glyph_h, c); break;
        case 2: fill_rect(img, x, y0, x + gw, y0 + t, c); break;
        case 3: fill_rect(img, x, y0 + glyph_h / 2 - t / 2, x + gw, y0 + glyph_h / 2 - t / 2 + t, c); break;
        default: fill_rect(img, x, y0 + glyph_h - t, x + gw, y0 + glyph_h, c); break;
      }
    }
    x += gw + gap;
    --word;
  }
  return x - x0;
}

void draw_button(RgbImage& img, const BoundingBox& b, const Color& bg, Rng& rng) {
  const Color fill = contrasting(rng, bg, 60.0, true);
  fill_rounded(img, b, rng.uniform_int(4, b.height() / 2), fill);
  const Color ink = luminance(fill) > 140 ? Color{25, 25, 25} : Color{250, 250, 250};
  const int glyph_h = std::max(5, static_cast<int>(b.height() * rng.uniform(0.32, 0.45)));
  const int text_w = static_cast<int>(b.width() * rng.uniform(0.35, 0.7));
  // Render into a scratch strip to measure, then center.
  RgbImage strip(text_w, glyph_h, 0);
  Rng probe = rng;
  const int used = draw_text(strip, 0, 0, text_w, glyph_h, {255, 255, 255}, probe);
  const int x0 = b.x_min + (b.width() - used) / 2;
  const int y0 = b.y_min + (b.height() - glyph_h) / 2;
  draw_text(img, x0, y0, text_w, glyph_h, ink, rng);
}

void draw_text_line(RgbImage& img, const BoundingBox& b, const Color& bg, Rng& rng) {
  const Color ink = contrasting(rng, bg, 90.0, false);
  draw_text(img, b.x_min, b.y_min, b.width(), b.height(), ink, rng);
}

void draw_image(RgbImage& img, const BoundingBox& b, Rng& rng) {
  const Color top = random_color(rng);
  const Color bottom = random_color(rng);
  for (int y = b.y_min; y < b.y_max; ++y) {
    const double t = b.height() > 1 ? static_cast<double>(y - b.y_min) / (b.height() - 1) : 0.0;
    Color c;
    for (int k = 0; k < 3; ++k) c[k] = static_cast<int>(std::lround(top[k] + t * (bottom[k] - top[k])));
    fill_rect(img, b.x_min, y, b.x_max, y + 1, c);
  }
  const Color shape = random_color(rng);
  const double cx = b.x_min + b.width() * rng.uniform(0.3, 0.7);
  const double cy = b.y_min + b.height() * rng.uniform(0.3, 0.7);
  const double r = std::min(b.width(), b.height()) * rng.uniform(0.15, 0.35);
  const bool circle = rng.bernoulli(0.5);
  for (int y = b.y_min; y < b.y_max; ++y) {
    for (int x = b.x_min; x < b.x_max; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const bool inside = circle ? dx * dx + dy * dy <= r * r : (dy >= -r && dy <= r && std::fabs(dx) <= (dy + r) / 2);
      if (inside) put(img, x, y, shape);
    }
  }
}

struct Planned {
  Kind kind;
  int w;
  int h;
};

Planned plan(Kind kind, int screen_w, Rng& rng) {
  const int max_w = screen_w - 32;
  switch (kind) {
    case Kind::kButton:
      return {kind, std::min(max_w, rng.uniform_int(120, 320)), rng.uniform_int(40, 64)};
    case Kind::kText:
      return {kind, std::min(max_w, rng.uniform_int(100, 320)), rng.uniform_int(16, 28)};
    default: {
      const int w = std::min(max_w, rng.uniform_int(60, 140));
      return {kind, w, std::clamp(static_cast<int>(w * rng.uniform(0.8, 1.25)), 16, 160)};
    }
  }
}

}  // namespace

Corpus generate_synthetic_corpus(int n_screens, std::uint64_t seed, const SyntheticOptions& options) {
  n_screens = std::max(1, n_screens);
  const int width = std::clamp(options.width, 160, 4096);
  const int height = std::clamp(options.height, 240, 4096);
  const int min_el = std::clamp(options.min_elements, 2, 8);
  const int max_el = std::clamp(options.max_elements, min_el, 8);
  const double share = std::clamp(options.tappable_share, 0.2, 0.8);

  Rng rng(seed);
  Corpus corpus;
  corpus.screens.reserve(static_cast<std::size_t>(n_screens));
  for (int s = 0; s < n_screens; ++s) {
    char id[32];
    std::snprintf(id, sizeof id, "syn%05d", s);

    const Color bg = rng.bernoulli(0.7) ? hsv_color(rng.uniform(0, 360), rng.uniform(0.0, 0.25), rng.uniform(0.85, 1.0))
                                        : hsv_color(rng.uniform(0, 360), rng.uniform(0.0, 0.4), rng.uniform(0.08, 0.3));
    auto image = std::make_shared<RgbImage>(width, height);
    fill_rect(*image, 0, 0, width, height, bg);

    // First two entries guarantee one element of each class.
    std::vector<Planned> items;
    const int count = rng.uniform_int(min_el, max_el);
    items.push_back(plan(Kind::kButton, width, rng));
    items.push_back(plan(rng.bernoulli(0.5) ? Kind::kText : Kind::kImage, width, rng));
    while (static_cast<int>(items.size()) < count) {
      const Kind k = rng.bernoulli(share) ? Kind::kButton : (rng.bernoulli(0.5) ? Kind::kText : Kind::kImage);
      items.push_back(plan(k, width, rng));
    }
    const int min_gap = 12;
    const int top = 24;
    const int usable = height - top - 16;
    auto needed = [&] {
      int total = 0;
      for (const auto& p : items) total += p.h + min_gap;
      return total;
    };
    while (needed() > usable && items.size() > 2) items.pop_back();
    rng.shuffle(std::span<Planned>(items));

    // Spread leftover space over the gaps.
    const int slack = std::max(0, usable - needed());
    std::vector<double> weights(items.size() + 1);
    double wsum = 0;
    for (auto& w : weights) wsum += (w = rng.uniform(0.1, 1.0));

    ScreenRecord record;
    record.screenshot.id = id;
    record.screenshot.source_app = "synthetic";
    record.screenshot.width = width;
    record.screenshot.height = height;

    double y = top + slack * weights[0] / wsum;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const Planned& p = items[i];
      const int x0 = rng.uniform_int(16, width - 16 - p.w);
      const int y0 = static_cast<int>(y);
      const BoundingBox box{x0, y0, x0 + p.w, y0 + p.h};
      y += p.h + min_gap + slack * weights[i + 1] / wsum;

      ElementAnnotation a;
      a.screenshot_id = id;
      a.element_id = "e" + std::to_string(i);
      a.bbox = box;
      a.is_leaf = true;
      const bool tappable = p.kind == Kind::kButton;
      a.declared_clickable = tappable;
      switch (p.kind) {
        case Kind::kButton:
          a.view_type = "Button";
          draw_button(*image, box, bg, rng);
          break;
        case Kind::kText:
          a.view_type = "TextView";
          draw_text_line(*image, box, bg, rng);
          break;
        case Kind::kImage:
          a.view_type = "ImageView";
          draw_image(*image, box, rng);
          break;
      }
      record.labels.push_back({a.ref(), std::vector<bool>(5, tappable)});
      record.annotations.push_back(std::move(a));
    }
    record.screenshot.pixels = std::move(image);
    corpus.screens.push_back(std::move(record));
  }
  return corpus;
}

}  // namespace tap::data
