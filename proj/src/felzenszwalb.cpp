#include <algorithm>
#include <cmath>
#include <numeric>

#include "tap/attribution.hpp"

namespace tap::attr {
namespace {

struct Edge {
  float weight;
  int a;
  int b;
};

// Separable Gaussian on each channel, borders clamped; output on 0..255.
std::vector<float> smooth(std::span<const float> rgb, int h, int w, double sigma) {
  std::vector<float> src(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) src[i] = rgb[i] * 255.0f;
  if (sigma < 0.01) return src;
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
    k[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
    norm += v;
  }
  for (auto& v : k) v = static_cast<float>(v / norm);

  std::vector<float> tmp(src.size());
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          acc += k[static_cast<std::size_t>(i + radius)] * src[(static_cast<std::size_t>(y) * w + xx) * 3 + c];
        }
        tmp[(static_cast<std::size_t>(y) * w + x) * 3 + c] = acc;
      }
    }
  }
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          acc += k[static_cast<std::size_t>(i + radius)] * tmp[(static_cast<std::size_t>(yy) * w + x) * 3 + c];
        }
        src[(static_cast<std::size_t>(y) * w + x) * 3 + c] = acc;
      }
    }
  }
  return src;
}

float distance(const std::vector<float>& img, int p, int q) {
  const float dr = img[3 * static_cast<std::size_t>(p)] - img[3 * static_cast<std::size_t>(q)];
  const float dg = img[3 * static_cast<std::size_t>(p) + 1] - img[3 * static_cast<std::size_t>(q) + 1];
  const float db = img[3 * static_cast<std::size_t>(p) + 2] - img[3 * static_cast<std::size_t>(q) + 2];
  return std::sqrt(dr * dr + dg * dg + db * db);
}

// 8-connected grid edges sorted by weight; ties keep construction order.
std::vector<Edge> sorted_edges(const std::vector<float>& img, int h, int w) {
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(h) * w * 4);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      if (x + 1 < w) edges.push_back({distance(img, p, p + 1), p, p + 1});
      if (y + 1 < h) edges.push_back({distance(img, p, p + w), p, p + w});
      if (x + 1 < w && y + 1 < h) edges.push_back({distance(img, p, p + w + 1), p, p + w + 1});
      if (x + 1 < w && y > 0) edges.push_back({distance(img, p, p - w + 1), p, p - w + 1});
    }
  }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) { return l.weight < r.weight; });
  return edges;
}

class DisjointSet {
 public:
  explicit DisjointSet(int n) : parent_(static_cast<std::size_t>(n)), size_(static_cast<std::size_t>(n), 1) {
    std::iota(parent_.begin(), parent_.end(), 0);
  }
  int find(int x) {
    while (parent_[static_cast<std::size_t>(x)] != x) {
      parent_[static_cast<std::size_t>(x)] = parent_[static_cast<std::size_t>(parent_[static_cast<std::size_t>(x)])];
      x = parent_[static_cast<std::size_t>(x)];
    }
    return x;
  }
  // Returns the surviving root.
  int join(int a, int b) {
    if (size_[static_cast<std::size_t>(a)] < size_[static_cast<std::size_t>(b)]) std::swap(a, b);
    parent_[static_cast<std::size_t>(b)] = a;
    size_[static_cast<std::size_t>(a)] += size_[static_cast<std::size_t>(b)];
    return a;
  }
  int size(int root) const { return size_[static_cast<std::size_t>(root)]; }

 private:
  std::vector<int> parent_;
  std::vector<int> size_;
};

std::vector<int> segment(const std::vector<Edge>& edges, int n, double scale, int min_size, int* count) {
  DisjointSet sets(n);
  std::vector<double> threshold(static_cast<std::size_t>(n), scale);
  for (const Edge& e : edges) {
    int a = sets.find(e.a);
    int b = sets.find(e.b);
    if (a == b) continue;
    if (e.weight <= threshold[static_cast<std::size_t>(a)] && e.weight <= threshold[static_cast<std::size_t>(b)]) {
      const int root = sets.join(a, b);
      threshold[static_cast<std::size_t>(root)] = e.weight + scale / sets.size(root);
    }
  }
  for (const Edge& e : edges) {
    const int a = sets.find(e.a);
    const int b = sets.find(e.b);
    if (a != b && (sets.size(a) < min_size || sets.size(b) < min_size)) sets.join(a, b);
  }
  std::vector<int> id(static_cast<std::size_t>(n), -1);
  std::vector<int> labels(static_cast<std::size_t>(n));
  int next = 0;
  for (int p = 0; p < n; ++p) {
    const int r = sets.find(p);
    if (id[static_cast<std::size_t>(r)] < 0) id[static_cast<std::size_t>(r)] = next++;
    labels[static_cast<std::size_t>(p)] = id[static_cast<std::size_t>(r)];
  }
  if (count) *count = next;
  return labels;
}

void check_image(std::span<const float> rgb, int h, int w) {
  if (h <= 0 || w <= 0) throw Error("empty_image", "segmentation needs a non-empty image");
  if (rgb.size() != static_cast<std::size_t>(h) * w * 3) {
    throw Error("shape_mismatch", "image must be " + std::to_string(h) + "x" + std::to_string(w) + "x3");
  }
}

}  // namespace

std::vector<int> felzenszwalb_labels(std::span<const float> rgb, int height, int width, double scale, double sigma,
                                     int min_size, int* count) {
  check_image(rgb, height, width);
  const auto img = smooth(rgb, height, width, std::clamp(sigma, 0.0, 10.0));
  return segment(sorted_edges(img, height, width), height * width, std::max(scale, 0.0), std::max(min_size, 1),
                 count);
}

std::vector<Region> felzenszwalb_segments(std::span<const float> rgb, int height, int width,
                                          const FelzenszwalbOptions& options, std::optional<BoundingBox> area) {
  check_image(rgb, height, width);
  BoundingBox box{0, 0, width, height};
  if (area) {
    box = {std::max(area->x_min, 0), std::max(area->y_min, 0), std::min(area->x_max, width),
           std::min(area->y_max, height)};
    if (box.width() <= 0 || box.height() <= 0) throw Error("empty_image", "segmentation area is empty");
  }
  const int h = box.height();
  const int w = box.width();
  std::vector<float> sub(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    const auto src = rgb.subspan((static_cast<std::size_t>(y + box.y_min) * width + box.x_min) * 3,
                                 static_cast<std::size_t>(w) * 3);
    std::copy(src.begin(), src.end(), sub.begin() + static_cast<std::ptrdiff_t>(y) * w * 3);
  }

  const auto edges = sorted_edges(smooth(sub, h, w, std::clamp(options.sigma, 0.0, 10.0)), h, w);
  std::vector<double> scales = options.scales;
  if (scales.empty()) scales = FelzenszwalbOptions{}.scales;

  std::vector<Region> out;
  for (double scale : scales) {
    int count = 0;
    const auto labels = segment(edges, h * w, std::max(scale, 0.0), std::max(options.min_size, 1), &count);
    const std::size_t first = out.size();
    for (int i = 0; i < count; ++i) {
      Region r;
      r.source = RegionSource::kFelzenszwalb;
      r.label = "felzenszwalb:" + std::to_string(static_cast<long long>(scale)) + ":" + std::to_string(i);
      out.push_back(std::move(r));
    }
    for (int y = 0; y < h; ++y) {
      int x = 0;
      while (x < w) {
        const int id = labels[static_cast<std::size_t>(y) * w + x];
        int end = x + 1;
        while (end < w && labels[static_cast<std::size_t>(y) * w + end] == id) ++end;
        out[first + static_cast<std::size_t>(id)].runs.push_back({y + box.y_min, x + box.x_min, end + box.x_min});
        x = end;
      }
    }
  }
  return out;
}

}  // namespace tap::attr
